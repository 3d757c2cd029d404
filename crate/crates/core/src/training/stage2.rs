use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::one_hot;
use crate::backbone::{Backbone, FrozenBackbone};
use crate::classifier::{cosine_logits, ClassifierWeights};
use crate::consensus::consensus_merge_with_mask;
use crate::data::{ClassId, ClassSplit, Dataset, Domain, ItemSubset, SplitPart};
use crate::error::{Error, Result};
use crate::eval::{novel_accuracy, EvalConfig};
use crate::generator::WeightGenerator;
use crate::model::{EmbeddingTable, Model};
use crate::numeric::{forward_backward, DenseArray, GradTag, GradientSet, Graph, ParameterSet, Var};

/// How photo and sketch exemplars are combined in the support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmtMode {
    /// One pass with sketch support and one with photo support on the same
    /// query; the two gradients are merged.
    #[default]
    DualPass,
    /// One pass whose support items are each photo or sketch at random.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Base rows dropped and regenerated per episode.
    pub pseudo_novel: usize,
    pub k_shot: usize,
    /// Photo queries per base class.
    pub q_per_class: usize,
    pub lr: f64,
    pub kd_enabled: bool,
    pub cmt_enabled: bool,
    pub cmt_mode: CmtMode,
    pub gc_enabled: bool,
    /// Keep training the backbone together with the generator.
    pub train_backbone: bool,
    /// Val-class episodes scored after each epoch (0 disables).
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 60,
            episodes_per_epoch: 20,
            pseudo_novel: 5,
            k_shot: 5,
            q_per_class: 5,
            lr: 0.01,
            kd_enabled: true,
            cmt_enabled: true,
            cmt_mode: CmtMode::DualPass,
            gc_enabled: true,
            train_backbone: false,
            val_episodes: 0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self, num_base: usize) -> Result<()> {
        if self.pseudo_novel == 0 || self.pseudo_novel >= num_base {
            return Err(Error::Config(format!(
                "pseudo-novel count {} must be in 1..{num_base}",
                self.pseudo_novel
            )));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::Config("stage-2 counts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("stage-2 lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportPass {
    Sketch,
    Photo,
    Mixed,
}

/// A task built from base classes only: some rows are dropped from `W_base`
/// and must be regenerated from exemplars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoEpisode {
    pub dropped: Vec<ClassId>,
    /// Remaining base classes in their original row order.
    pub retained: Vec<ClassId>,
    /// Support per dropped class, in `dropped` order.
    pub sketch_support: Vec<Vec<usize>>,
    pub photo_support: Vec<Vec<usize>>,
    pub mixed_support: Vec<Vec<usize>>,
    /// Photo queries from retained and dropped classes.
    pub query: Vec<(usize, ClassId)>,
}

impl PseudoEpisode {
    pub fn support(&self, pass: SupportPass) -> &[Vec<usize>] {
        match pass {
            SupportPass::Sketch => &self.sketch_support,
            SupportPass::Photo => &self.photo_support,
            SupportPass::Mixed => &self.mixed_support,
        }
    }

    /// Retained classes followed by dropped classes: the row order of `W_new'`.
    pub fn label_space(&self) -> Vec<ClassId> {
        self.retained.iter().chain(&self.dropped).copied().collect()
    }
}

pub fn make_pseudo_episode<R: Rng>(
    base: &ClassifierWeights,
    dataset: &Dataset,
    split: &ClassSplit,
    cfg: &Stage2Config,
    rng: &mut R,
) -> Result<PseudoEpisode> {
    let ids = base.class_ids();
    if cfg.pseudo_novel == 0 || cfg.pseudo_novel >= ids.len() {
        return Err(Error::Config(format!("cannot drop {} of {} base rows", cfg.pseudo_novel, ids.len())));
    }
    let dropped: Vec<ClassId> = ids.choose_multiple(rng, cfg.pseudo_novel).copied().collect();
    let retained: Vec<ClassId> = ids.iter().copied().filter(|c| !dropped.contains(c)).collect();
    let part = SplitPart::Base(ItemSubset::Train);
    let (mut sketch_support, mut photo_support, mut mixed_support) = (Vec::new(), Vec::new(), Vec::new());
    let mut query = Vec::new();
    for &class in ids {
        let name = &dataset.class_names()[class.0];
        let mut photos = split.items(dataset, part, class, Domain::Photo);
        photos.shuffle(rng);
        if photos.len() < cfg.q_per_class {
            return Err(Error::InsufficientData(format!("class `{name}` has {} training photos", photos.len())));
        }
        query.extend(photos[..cfg.q_per_class].iter().map(|&i| (i, class)));
        if !dropped.contains(&class) {
            continue;
        }
        let mut sketches = split.items(dataset, part, class, Domain::Sketch);
        sketches.shuffle(rng);
        let spare = &photos[cfg.q_per_class..];
        if sketches.len() < cfg.k_shot || spare.len() < cfg.k_shot {
            return Err(Error::InsufficientData(format!(
                "class `{name}` needs {} support items per domain beyond its queries",
                cfg.k_shot
            )));
        }
        let s = sketches[..cfg.k_shot].to_vec();
        let p = spare[..cfg.k_shot].to_vec();
        let m = (0..cfg.k_shot).map(|j| if rng.gen_bool(0.5) { p[j] } else { s[j] }).collect();
        sketch_support.push(s);
        photo_support.push(p);
        mixed_support.push(m);
    }
    // support lists follow `dropped` order, not base order
    let order: Vec<usize> = dropped
        .iter()
        .map(|d| ids.iter().filter(|c| dropped.contains(c)).position(|c| c == d).expect("dropped id"))
        .collect();
    let reorder = |v: Vec<Vec<usize>>| order.iter().map(|&i| v[i].clone()).collect();
    Ok(PseudoEpisode {
        sketch_support: reorder(sketch_support),
        photo_support: reorder(photo_support),
        mixed_support: reorder(mixed_support),
        dropped,
        retained,
        query,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_distil: f64,
    pub zero_fraction: f64,
    pub val_novel_acc: Option<f64>,
}

impl fmt::Display for Stage2Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage=2 epoch={} loss_cls={:.6} loss_distil={:.6} zero_fraction={:.4}",
            self.epoch, self.loss_cls, self.loss_distil, self.zero_fraction
        )?;
        if let Some(acc) = self.val_novel_acc {
            write!(f, " val_novel_acc={acc:.4}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub generator: WeightGenerator,
    /// Retrained backbone when `train_backbone` is set.
    pub backbone: Option<Backbone>,
    pub history: Vec<Stage2Epoch>,
}

/// Per-episode constants shared by every support pass.
struct EpisodeContext {
    base_rows: DenseArray,
    labels: Vec<ClassId>,
    targets: DenseArray,
    teacher: DenseArray,
    distil_cols: Vec<usize>,
    query_items: Vec<usize>,
}

struct Trainer<'a> {
    dataset: &'a Dataset,
    table: &'a EmbeddingTable,
    base: &'a ClassifierWeights,
    prepared_base: ClassifierWeights,
    generator: &'a WeightGenerator,
    backbone: Option<&'a Backbone>,
    cfg: &'a Stage2Config,
}

impl Trainer<'_> {
    fn context(&self, ep: &PseudoEpisode) -> Result<EpisodeContext> {
        let labels = ep.label_space();
        let query_labels: Vec<ClassId> = ep.query.iter().map(|&(_, c)| c).collect();
        let query_items: Vec<usize> = ep.query.iter().map(|&(i, _)| i).collect();
        let mut teacher = Vec::with_capacity(query_items.len() * self.base.num_classes());
        for &i in &query_items {
            teacher.extend(self.base.predict(self.table.get(i)?.values())?);
        }
        let distil_cols = self
            .base
            .class_ids()
            .iter()
            .map(|id| labels.iter().position(|c| c == id).ok_or_else(|| Error::Alignment(format!("base class {id} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeContext {
            base_rows: self.prepared_base.restricted(&ep.retained)?.weights().clone(),
            targets: one_hot(&query_labels, &labels)?,
            teacher: DenseArray::new(vec![query_items.len(), self.base.num_classes()], teacher)?,
            labels,
            distil_cols,
            query_items,
        })
    }

    fn embeddings(&self, g: &mut Graph, params: &ParameterSet, items: &[usize]) -> Result<Var> {
        match self.backbone {
            Some(bb) => {
                let images: Vec<_> = items.iter().map(|&i| &self.dataset.item(i).image).collect();
                let x = g.constant(bb.batch(&images)?);
                bb.forward(g, params, x, true)
            }
            None => {
                let rows: Vec<&DenseArray> = items.iter().map(|&i| self.table.get(i).map(|e| &e.0)).collect::<Result<_>>()?;
                Ok(g.constant(DenseArray::concat_rows(&rows)?))
            }
        }
    }

    /// Builds `L_cls (+ L_distil)` for one support choice; returns the loss node and both parts.
    fn loss(&self, g: &mut Graph, params: &ParameterSet, ctx: &EpisodeContext, support: &[Vec<usize>]) -> Result<(Var, f64, f64)> {
        let flat: Vec<usize> = support.iter().flatten().copied().collect();
        let s = self.embeddings(g, params, &flat)?;
        let mut avg = vec![0.0; support.len() * flat.len()];
        let mut offset = 0;
        for (r, shots) in support.iter().enumerate() {
            for j in 0..shots.len() {
                avg[r * flat.len() + offset + j] = 1.0 / shots.len() as f64;
            }
            offset += shots.len();
        }
        let avg = g.constant(DenseArray::new(vec![support.len(), flat.len()], avg)?);
        let mean = g.matmul(avg, s)?;
        let protos = g.normalize_rows(mean).map_err(|_| Error::ZeroEmbedding)?;
        let base_rows = g.constant(ctx.base_rows.clone());
        let w_i = g.concat_rows(&[base_rows, protos])?;
        let w_new = self.generator.refine_on(g, params, w_i, true)?;
        let q = self.embeddings(g, params, &ctx.query_items)?;
        let logits = cosine_logits(g, q, w_new, self.base.scale())?;
        debug_assert_eq!(g.value(logits).cols(), ctx.labels.len());
        let cls = g.softmax_cross_entropy(logits, ctx.targets.clone())?;
        let cls_value = g.scalar(cls);
        if !self.cfg.kd_enabled {
            return Ok((cls, cls_value, 0.0));
        }
        let student = g.select_cols(logits, &ctx.distil_cols)?;
        let distil = g.softmax_cross_entropy(student, ctx.teacher.clone())?;
        let distil_value = g.scalar(distil);
        Ok((g.add(cls, distil)?, cls_value, distil_value))
    }

    fn pass(&self, params: &ParameterSet, ctx: &EpisodeContext, support: &[Vec<usize>]) -> Result<(GradientSet, f64, f64)> {
        let mut parts = (0.0, 0.0);
        let (_, grads) = forward_backward(params, |g, ps| {
            let (loss, c, d) = self.loss(g, ps, ctx, support)?;
            parts = (c, d);
            Ok(loss)
        })?;
        Ok((grads, parts.0, parts.1))
    }
}

/// Trains the generator on pseudo-incremental episodes drawn from the base
/// training items. The backbone and `W_base` are left untouched unless
/// `train_backbone` is set, in which case a retrained copy is returned.
pub fn train_stage2(
    backbone: &FrozenBackbone,
    base: &ClassifierWeights,
    generator: WeightGenerator,
    dataset: &Dataset,
    split: &ClassSplit,
    table: &EmbeddingTable,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    cfg.validate(base.num_classes())?;
    if !generator.config().use_gat {
        return Ok(Stage2Output { generator, backbone: None, history: Vec::new() });
    }
    let mut params = generator.params().clone();
    let thawed = cfg.train_backbone.then(|| backbone.thaw());
    if let Some(bb) = &thawed {
        for (k, v) in bb.params().iter() {
            params.insert(k.clone(), v.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut current = generator;
    for epoch in 0..cfg.epochs {
        let (mut lc, mut ld, mut zf) = (0.0, 0.0, 0.0);
        for step in 0..cfg.episodes_per_epoch {
            let trainer = Trainer {
                dataset,
                table,
                base,
                prepared_base: current.prepare_base(base)?,
                generator: &current,
                backbone: thawed.as_ref(),
                cfg,
            };
            let ep = make_pseudo_episode(base, dataset, split, cfg, &mut rng)?;
            let ctx = trainer.context(&ep)?;
            let (update, c, d, z) = match (cfg.cmt_enabled, cfg.cmt_mode) {
                (false, _) => {
                    let (g, c, d) = trainer.pass(&params, &ctx, ep.support(SupportPass::Sketch))?;
                    (g, c, d, 0.0)
                }
                (true, CmtMode::Mixed) => {
                    let (g, c, d) = trainer.pass(&params, &ctx, ep.support(SupportPass::Mixed))?;
                    (g, c, d, 0.0)
                }
                (true, CmtMode::DualPass) => {
                    let (gs, cs, ds) = trainer.pass(&params, &ctx, ep.support(SupportPass::Sketch))?;
                    let (gp, cp, dp) = trainer.pass(&params, &ctx, ep.support(SupportPass::Photo))?;
                    let (gs, gp) = (gs.with_tag(GradTag::Sketch), gp.with_tag(GradTag::Photo));
                    let (g, z) = if cfg.gc_enabled {
                        let (m, mask) = consensus_merge_with_mask(&gp, &gs)?;
                        (m, mask.zero_fraction())
                    } else {
                        (gp.sum(&gs)?, 0.0)
                    };
                    (g, (cs + cp) / 2.0, (ds + dp) / 2.0, z)
                }
            };
            if !update.is_finite() {
                return Err(Error::NonFinite(format!("stage-2 gradient at epoch {epoch} episode {step}")));
            }
            params.accumulate(&update)?;
            params.sgd_step(cfg.lr);
            current = WeightGenerator::from_params(current.config().clone(), params.clone())?;
            lc += c;
            ld += d;
            zf += z;
        }
        let n = cfg.episodes_per_epoch as f64;
        let val_novel_acc = if cfg.val_episodes > 0 && !split.val.is_empty() {
            let model = Model { backbone: backbone.clone(), base: base.clone(), generator: current.clone() };
            let eval = EvalConfig { n_episodes: cfg.val_episodes, k_shot: cfg.k_shot, seeds: vec![cfg.seed], ..EvalConfig::default() };
            Some(novel_accuracy(&model, table, dataset, split, SplitPart::Val, &eval, cfg.seed)?)
        } else {
            None
        };
        let record = Stage2Epoch { epoch, loss_cls: lc / n, loss_distil: ld / n, zero_fraction: zf / n, val_novel_acc };
        log::info!("{record}");
        history.push(record);
    }
    let backbone = match thawed {
        Some(bb) => Some(Backbone::from_params(bb.config().clone(), params)?),
        None => None,
    };
    Ok(Stage2Output { generator: current, backbone, history })
}
