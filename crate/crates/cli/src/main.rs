use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fscil_cli::service::{self, ServiceState, BIND_ENV, DEFAULT_BIND};
use fscil_cli::source::DataSource;
use fscil_core::checkpoint::{short_hash, Checkpoint};
use fscil_core::data::{Dataset, SplitCounts, SupportDomain};
use fscil_core::eval::{evaluate, run_matrix, EvalConfig, EvalContext, MatrixEntry, Metric};
use fscil_core::pipeline::{pretrain, train_generator, PipelineConfig, Trained};
use fscil_core::training::CmtMode;
use fscil_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fscil", version, about = "Sketch-supported few-shot class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 (backbone + base classifier) or stage 2 (weight generator).
    Train(TrainArgs),
    /// Evaluate a checkpoint with the episodic protocol.
    Eval(EvalArgs),
    /// Train ablated variants next to the full model and tabulate them.
    Ablate(AblateArgs),
    /// Run the HTTP teaching service.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root laid out as `<root>/{photo,sketch}/<class>/<image>`.
    #[arg(long, conflicts_with_all = ["synthetic", "set"])]
    data: Option<PathBuf>,
    /// Side length images from `--data` are resized to.
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Synthetic dataset spec file with `key=value` lines.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Synthetic spec override, e.g. `--set classes=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl DataArgs {
    fn given(&self) -> bool {
        self.data.is_some() || self.synthetic.is_some() || !self.set.is_empty()
    }

    /// Explicit flags win, then the checkpoint's recorded source, then the default synthetic set.
    fn source(&self, recorded: Option<&str>) -> Result<DataSource> {
        if let Some(root) = &self.data {
            return Ok(DataSource::Directory { root: root.clone(), size: self.image_size });
        }
        match recorded {
            Some(r) if !self.given() => DataSource::parse(r),
            _ => DataSource::synthetic(self.synthetic.as_deref(), &self.set),
        }
    }
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, default_value_t = 10)]
    base_classes: usize,
    #[arg(long, default_value_t = 5)]
    val_classes: usize,
    #[arg(long, default_value_t = 15)]
    novel_classes: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CmtArg {
    Dual,
    Mixed,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint to start stage 2 from (stage 1 runs first when absent).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Append one line per epoch to this file.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Epochs of the stage being trained.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate of the stage being trained.
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    switches: Switches,
    #[arg(long, value_enum, default_value = "dual")]
    cmt_mode: CmtArg,
    /// Keep updating the backbone during stage 2.
    #[arg(long)]
    train_backbone: bool,
    /// Val-class episodes scored after every stage-2 epoch.
    #[arg(long, default_value_t = 0)]
    val_episodes: usize,
}

#[derive(Args, Clone, Default)]
struct Switches {
    /// Disable graph-attention refinement.
    #[arg(long)]
    no_gat: bool,
    /// Disable gradient consensus (sum the domain gradients).
    #[arg(long)]
    no_gc: bool,
    /// Disable the distillation loss.
    #[arg(long)]
    no_kd: bool,
    /// Disable cross-modal training (sketch-only support in stage 2).
    #[arg(long)]
    no_cmt: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SupportArg {
    Sketch,
    Photo,
    Mixed,
}

impl From<SupportArg> for SupportDomain {
    fn from(s: SupportArg) -> Self {
        match s {
            SupportArg::Sketch => SupportDomain::Sketch,
            SupportArg::Photo => SupportDomain::Photo,
            SupportArg::Mixed => SupportDomain::Mixed,
        }
    }
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "sketch")]
    support: SupportArg,
}

impl ProtocolArgs {
    fn config(&self, k_shot: usize) -> EvalConfig {
        EvalConfig {
            n_episodes: self.episodes,
            n_way: self.ways,
            k_shot,
            q_per_class: self.queries,
            support_domain: self.support.into(),
            seeds: self.seeds.clone(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// novel, base or both.
    #[arg(long, default_value = "novel")]
    metric: Metric,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Text report path.
    #[arg(long)]
    out: PathBuf,
    /// CSV report path (defaults to `--out` with a `.csv` extension).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Fully trained checkpoint used as the reference row; trained from scratch when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variants to train; all four when none is given.
    #[command(flatten)]
    switches: Switches,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    shots: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "novel,base,both")]
    metrics: Vec<Metric>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory receiving one checkpoint per trained variant.
    #[arg(long)]
    save_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
    bind: SocketAddr,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn base_config(seed: u64, split: &SplitArgs, dataset: &Dataset) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_scale().with_seed(seed);
    cfg.counts = SplitCounts { base: split.base_classes, val: split.val_classes, novel: split.novel_classes };
    cfg.split_seed = split.split_seed;
    cfg.backbone.input = dataset.shape();
    cfg
}

fn apply_switches(cfg: &mut PipelineConfig, s: &Switches) {
    cfg.generator.use_gat = !s.no_gat;
    cfg.stage1.gc_enabled = !s.no_gc;
    cfg.stage2.gc_enabled = !s.no_gc;
    cfg.stage2.kd_enabled = !s.no_kd;
    cfg.stage2.cmt_enabled = !s.no_cmt;
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stage1_ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let source = a.data.source(stage1_ckpt.as_ref().and_then(|c| c.meta.data.as_deref()))?;
    let dataset = source.load()?;
    let mut cfg = base_config(a.seed, &a.split, &dataset);
    apply_switches(&mut cfg, &a.switches);
    cfg.stage2.cmt_mode = match a.cmt_mode {
        CmtArg::Dual => CmtMode::DualPass,
        CmtArg::Mixed => CmtMode::Mixed,
    };
    cfg.stage2.train_backbone = a.train_backbone;
    cfg.stage2.val_episodes = a.val_episodes;
    let (epochs, lr) = if a.stage == 1 { (&mut cfg.stage1.epochs, &mut cfg.stage1.lr) } else { (&mut cfg.stage2.epochs, &mut cfg.stage2.lr) };
    if let Some(e) = a.epochs {
        *epochs = e;
    }
    if let Some(l) = a.lr {
        *lr = l;
    }
    info!("data {} ({} items, {} classes)", source.describe(), dataset.len(), dataset.num_classes());

    let pre = match (&stage1_ckpt, a.stage) {
        (Some(c), 2) => {
            if let Some(s1) = &c.meta.stage1 {
                cfg.stage1 = s1.clone();
            }
            cfg.backbone = c.backbone_config.clone();
            Trained::from_checkpoint(c, &dataset)?
        }
        (Some(_), _) => return Err(Error::Config("--checkpoint is only used by --stage 2".into())),
        (None, _) => pretrain(&dataset, &cfg)?,
    };
    let mut lines: Vec<String> = if stage1_ckpt.is_none() { pre.stage1_history.iter().map(ToString::to_string).collect() } else { Vec::new() };
    let trained = if a.stage == 2 {
        let t = train_generator(&dataset, &pre, cfg.generator.clone(), &cfg.stage2)?;
        lines.extend(t.stage2_history.iter().map(ToString::to_string));
        t
    } else {
        pre
    };
    for l in &lines {
        info!("{l}");
    }
    if let Some(p) = &a.metrics_log {
        append_lines(p, &lines)?;
    }
    let ckpt = trained.checkpoint(&dataset, &cfg, Some(source.describe()))?;
    ckpt.save(&a.out)?;
    let hash = ckpt.hash()?;
    println!("checkpoint {} sha256={} ({})", a.out.display(), hash, short_hash(&hash));
    Ok(())
}

fn load_for_eval(path: &Path, data: &DataArgs) -> Result<(Checkpoint, Dataset, Trained)> {
    let ckpt = Checkpoint::load(path)?;
    let source = data.source(ckpt.meta.data.as_deref())?;
    let dataset = source.load()?;
    let trained = Trained::from_checkpoint(&ckpt, &dataset)?;
    Ok((ckpt, dataset, trained))
}

fn csv_path(out: &Path, csv: Option<PathBuf>) -> PathBuf {
    csv.unwrap_or_else(|| out.with_extension("csv"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ckpt, dataset, trained) = load_for_eval(&a.checkpoint, &a.data)?;
    let ctx = EvalContext {
        model: &trained.model,
        table: &trained.table,
        dataset: &dataset,
        split: &trained.split,
        checkpoint_hash: short_hash(&ckpt.hash()?).to_string(),
    };
    let report = evaluate(&ctx, a.metric, &a.protocol.config(a.shots))?;
    let text = report.to_text();
    write_file(&a.out, &text)?;
    write_file(&csv_path(&a.out, a.csv), &report.to_csv())?;
    print!("{text}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut switches = a.switches.clone();
    if !(switches.no_gat || switches.no_gc || switches.no_kd || switches.no_cmt) {
        switches = Switches { no_gat: true, no_gc: true, no_kd: true, no_cmt: true };
    }
    let (dataset, source, cfg, full) = match &a.checkpoint {
        Some(p) => {
            let (ckpt, dataset, trained) = load_for_eval(p, &a.data)?;
            let mut cfg = base_config(a.seed, &a.split, &dataset);
            cfg.backbone = ckpt.backbone_config.clone();
            cfg.generator = ckpt.generator_config.clone();
            if let Some(s) = &ckpt.meta.stage1 {
                cfg.stage1 = s.clone();
            }
            if let Some(s) = &ckpt.meta.stage2 {
                cfg.stage2 = s.clone();
            }
            let source = a.data.source(ckpt.meta.data.as_deref())?;
            (dataset, source, cfg, trained)
        }
        None => {
            let source = a.data.source(None)?;
            let dataset = source.load()?;
            let cfg = base_config(a.seed, &a.split, &dataset);
            info!("training the full model");
            let pre = pretrain(&dataset, &cfg)?;
            let full = train_generator(&dataset, &pre, cfg.generator.clone(), &cfg.stage2)?;
            (dataset, source, cfg, full)
        }
    };

    let mut variants: Vec<(String, PipelineConfig, Trained)> = Vec::new();
    let one = |name: &str, s: Switches| -> Result<(String, PipelineConfig, Trained)> {
        let mut c = cfg.clone();
        apply_switches(&mut c, &s);
        info!("training variant {name}");
        let pre = if s.no_gc { pretrain(&dataset, &c)? } else { full.clone() };
        let t = train_generator(&dataset, &pre, c.generator.clone(), &c.stage2)?;
        Ok((name.to_string(), c, t))
    };
    let off = Switches::default();
    if switches.no_gat {
        variants.push(one("no_gat", Switches { no_gat: true, ..off.clone() })?);
    }
    if switches.no_gc {
        variants.push(one("no_gc", Switches { no_gc: true, ..off.clone() })?);
    }
    if switches.no_kd {
        variants.push(one("no_kd", Switches { no_kd: true, ..off.clone() })?);
    }
    if switches.no_cmt {
        variants.push(one("no_cmt", Switches { no_cmt: true, ..off.clone() })?);
    }

    if let Some(dir) = &a.save_dir {
        fs::create_dir_all(dir)?;
        for (name, c, t) in &variants {
            t.checkpoint(&dataset, c, Some(source.describe()))?.save(&dir.join(format!("{name}.ckpt")))?;
        }
    }

    let mut entries = vec![MatrixEntry { label: "full".into(), model: &full.model, table: &full.table }];
    entries.extend(variants.iter().map(|(n, _, t)| MatrixEntry { label: n.clone(), model: &t.model, table: &t.table }));
    let matrix = run_matrix(&entries, &a.metrics, &a.shots, &a.protocol.config(a.shots[0]), &dataset, &full.split)?;
    let text = matrix.to_text();
    write_file(&a.out, &text)?;
    write_file(&csv_path(&a.out, a.csv), &matrix.to_csv())?;
    print!("{text}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = Arc::new(ServiceState::load(a.checkpoint)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, a.bind))?;
    Ok(())
}
