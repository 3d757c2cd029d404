//! Episode-based evaluation: accuracy on novel classes, on base classes after
//! an incremental step, and on the joint label space.

mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{run_matrix, EvalReport, MatrixEntry, MatrixRow, ReportMatrix, Series};

use crate::backbone::Embedding;
use crate::classifier::{argmax, ClassifierWeights};
use crate::data::{sample_episode, ClassId, ClassSplit, Dataset, Episode, ItemSubset, SplitPart, SupportDomain};
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub support_domain: SupportDomain,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 600, n_way: 5, k_shot: 5, q_per_class: 15, support_domain: SupportDomain::Sketch, seeds: (0..5).collect() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 || self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 || self.seeds.is_empty() {
            return Err(Error::Config("evaluation counts and seed list must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Novel,
    Base,
    Both,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Novel => "novel",
            Metric::Base => "base",
            Metric::Both => "both",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "novel" => Ok(Metric::Novel),
            "base" => Ok(Metric::Base),
            "both" => Ok(Metric::Both),
            other => Err(Error::Config(format!("unknown metric `{other}` (novel, base, both)"))),
        }
    }
}

/// Correct/total counts of one scoring pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    correct: usize,
    total: usize,
}

impl Tally {
    fn rate(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn merge(self, other: Tally) -> Tally {
        Tally { correct: self.correct + other.correct, total: self.total + other.total }
    }
}

/// Scores `(item, true class)` queries against `weights`, whose rows define
/// the whole label space of the call.
fn score(weights: &ClassifierWeights, table: &EmbeddingTable, queries: &[(usize, ClassId)]) -> Result<Tally> {
    let mut t = Tally::default();
    for &(item, label) in queries {
        let logits = weights.logits(table.get(item)?.values())?;
        t.correct += usize::from(weights.class_ids()[argmax(&logits)] == label);
        t.total += 1;
    }
    Ok(t)
}

fn labelled_queries(ep: &Episode) -> Vec<(usize, ClassId)> {
    ep.query.iter().map(|&(i, pos)| (i, ep.way_classes[pos])).collect()
}

fn support_of(ep: &Episode, table: &EmbeddingTable) -> Result<Vec<(ClassId, Vec<Embedding>)>> {
    ep.way_classes.iter().zip(&ep.support).map(|(&c, items)| Ok((c, table.gather(items)?))).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean episode accuracy on novel-style episodes drawn from `part`
/// (label space restricted to the episode's classes) for one seed.
pub fn novel_accuracy(
    model: &Model,
    table: &EmbeddingTable,
    dataset: &Dataset,
    split: &ClassSplit,
    part: SplitPart,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::with_capacity(cfg.n_episodes);
    for _ in 0..cfg.n_episodes {
        let ep = sample_episode(dataset, split, part, cfg.n_way, cfg.k_shot, cfg.q_per_class, cfg.support_domain, &mut rng)?;
        let w_new = model.increment(&support_of(&ep, table)?)?;
        let restricted = w_new.restricted(&ep.way_classes)?;
        accs.push(score(&restricted, table, &labelled_queries(&ep))?.rate());
    }
    Ok(mean(&accs))
}

/// Base-class accuracy after and before the incremental step, one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseScores {
    pub after: f64,
    pub before: f64,
}

pub fn base_accuracy(model: &Model, table: &EmbeddingTable, dataset: &Dataset, split: &ClassSplit, cfg: &EvalConfig, seed: u64) -> Result<BaseScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut after, mut before) = (Vec::new(), Vec::new());
    for _ in 0..cfg.n_episodes {
        let base_ep = sample_episode(dataset, split, SplitPart::Base(ItemSubset::Test), cfg.n_way, 0, cfg.q_per_class, cfg.support_domain, &mut rng)?;
        let novel_ep = sample_episode(dataset, split, SplitPart::Novel, cfg.n_way, cfg.k_shot, 0, cfg.support_domain, &mut rng)?;
        let w_new = model.increment(&support_of(&novel_ep, table)?)?;
        let queries = labelled_queries(&base_ep);
        after.push(score(&w_new.restricted(&base_ep.way_classes)?, table, &queries)?.rate());
        before.push(score(&model.base.restricted(&base_ep.way_classes)?, table, &queries)?.rate());
    }
    Ok(BaseScores { after: mean(&after), before: mean(&before) })
}

/// Joint-label-space accuracy plus the restricted accuracies on the same episodes, one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BothScores {
    pub both: f64,
    pub base_restricted: f64,
    pub novel_restricted: f64,
}

pub fn both_accuracy(model: &Model, table: &EmbeddingTable, dataset: &Dataset, split: &ClassSplit, cfg: &EvalConfig, seed: u64) -> Result<BothScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut base_r, mut novel_r) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.n_episodes {
        let base_ep = sample_episode(dataset, split, SplitPart::Base(ItemSubset::Test), cfg.n_way, 0, cfg.q_per_class, cfg.support_domain, &mut rng)?;
        let novel_ep = sample_episode(dataset, split, SplitPart::Novel, cfg.n_way, cfg.k_shot, cfg.q_per_class, cfg.support_domain, &mut rng)?;
        let w_new = model.increment(&support_of(&novel_ep, table)?)?;
        let labels: Vec<ClassId> = base_ep.way_classes.iter().chain(&novel_ep.way_classes).copied().collect();
        let (bq, nq) = (labelled_queries(&base_ep), labelled_queries(&novel_ep));
        let joint = w_new.restricted(&labels)?;
        both.push(score(&joint, table, &bq)?.merge(score(&joint, table, &nq)?).rate());
        base_r.push(score(&w_new.restricted(&base_ep.way_classes)?, table, &bq)?.rate());
        novel_r.push(score(&w_new.restricted(&novel_ep.way_classes)?, table, &nq)?.rate());
    }
    Ok(BothScores { both: mean(&both), base_restricted: mean(&base_r), novel_restricted: mean(&novel_r) })
}

/// Everything needed to run one suite.
pub struct EvalContext<'a> {
    pub model: &'a Model,
    pub table: &'a EmbeddingTable,
    pub dataset: &'a Dataset,
    pub split: &'a ClassSplit,
    pub checkpoint_hash: String,
}

pub fn acc_novel(ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&s| novel_accuracy(ctx.model, ctx.table, ctx.dataset, ctx.split, SplitPart::Novel, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(Metric::Novel, per_seed, Vec::new(), cfg, &ctx.checkpoint_hash))
}

pub fn acc_base(ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = cfg
        .seeds
        .iter()
        .map(|&s| base_accuracy(ctx.model, ctx.table, ctx.dataset, ctx.split, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let after = scores.iter().map(|s| s.after).collect();
    let before = Series::new("pre_increment", scores.iter().map(|s| s.before).collect());
    Ok(EvalReport::new(Metric::Base, after, vec![before], cfg, &ctx.checkpoint_hash))
}

pub fn acc_both(ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = cfg
        .seeds
        .iter()
        .map(|&s| both_accuracy(ctx.model, ctx.table, ctx.dataset, ctx.split, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let extras = vec![
        Series::new("base_restricted", scores.iter().map(|s| s.base_restricted).collect()),
        Series::new("novel_restricted", scores.iter().map(|s| s.novel_restricted).collect()),
    ];
    Ok(EvalReport::new(Metric::Both, scores.iter().map(|s| s.both).collect(), extras, cfg, &ctx.checkpoint_hash))
}

pub fn evaluate(ctx: &EvalContext<'_>, metric: Metric, cfg: &EvalConfig) -> Result<EvalReport> {
    match metric {
        Metric::Novel => acc_novel(ctx, cfg),
        Metric::Base => acc_base(ctx, cfg),
        Metric::Both => acc_both(ctx, cfg),
    }
}
