use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, one_hot};
use crate::backbone::{Backbone, BackboneConfig};
use crate::classifier::{cosine_logits, cosine_logits_learnable, ClassifierWeights, DEFAULT_SCALE};
use crate::consensus::consensus_merge_with_mask;
use crate::data::{ClassId, ClassSplit, Dataset, Domain};
use crate::error::{Error, Result};
use crate::numeric::{forward_backward, DenseArray, GradTag, Graph, ParameterSet, Var};

pub const HEAD: &str = "classifier.weight";
pub const HEAD_SCALE: &str = "classifier.scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Items per domain in every step.
    pub batch_size: usize,
    pub lr: f64,
    pub gc_enabled: bool,
    pub seed: u64,
    pub scale: f64,
    pub learnable_scale: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 8, lr: 0.01, gc_enabled: true, seed: 0, scale: DEFAULT_SCALE, learnable_scale: false }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-1 epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("stage-1 lr {} and scale {} must be positive", self.lr, self.scale)));
        }
        Ok(())
    }
}

/// Images and one-hot targets of one domain's mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: DenseArray,
    pub targets: DenseArray,
}

impl Batch {
    pub fn from_items(backbone: &Backbone, dataset: &Dataset, items: &[usize], classes: &[ClassId]) -> Result<Self> {
        let images: Vec<_> = items.iter().map(|&i| &dataset.item(i).image).collect();
        let labels: Vec<ClassId> = items.iter().map(|&i| dataset.item(i).label).collect();
        Ok(Self { images: backbone.batch(&images)?, targets: one_hot(&labels, classes)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_photo: f64,
    pub loss_sketch: f64,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss_photo: f64,
    pub loss_sketch: f64,
    pub zero_fraction: f64,
    pub val_photo_acc: f64,
    pub val_sketch_acc: f64,
}

impl fmt::Display for Stage1Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage=1 epoch={} loss_photo={:.6} loss_sketch={:.6} zero_fraction={:.4} val_photo_acc={:.4} val_sketch_acc={:.4}",
            self.epoch, self.loss_photo, self.loss_sketch, self.zero_fraction, self.val_photo_acc, self.val_sketch_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub backbone: Backbone,
    pub base: ClassifierWeights,
    pub history: Vec<Stage1Epoch>,
}

/// Mean cross-entropy of the cosine head on one batch.
pub fn batch_loss(g: &mut Graph, params: &ParameterSet, backbone: &Backbone, batch: &Batch, cfg: &Stage1Config) -> Result<Var> {
    let x = g.constant(batch.images.clone());
    let f = backbone.forward(g, params, x, true)?;
    let w = g.param(params, HEAD)?;
    let z = if cfg.learnable_scale {
        let s = g.param(params, HEAD_SCALE)?;
        cosine_logits_learnable(g, f, w, s)?
    } else {
        cosine_logits(g, f, w, cfg.scale)?
    };
    g.softmax_cross_entropy(z, batch.targets.clone())
}

/// One SGD step on a photo batch and a sketch batch. The two gradients are
/// merged by sign consensus when `gc_enabled`, otherwise summed.
pub fn stage1_step(
    params: &mut ParameterSet,
    backbone: &Backbone,
    photo: &Batch,
    sketch: &Batch,
    cfg: &Stage1Config,
) -> Result<StepStats> {
    let (loss_photo, gp) = forward_backward(params, |g, ps| batch_loss(g, ps, backbone, photo, cfg))?;
    let (loss_sketch, gs) = forward_backward(params, |g, ps| batch_loss(g, ps, backbone, sketch, cfg))?;
    let (gp, gs) = (gp.with_tag(GradTag::Photo), gs.with_tag(GradTag::Sketch));
    let (update, zero_fraction) = if cfg.gc_enabled {
        let (merged, mask) = consensus_merge_with_mask(&gp, &gs)?;
        (merged, mask.zero_fraction())
    } else {
        (gp.sum(&gs)?, 0.0)
    };
    params.accumulate(&update)?;
    params.sgd_step(cfg.lr);
    Ok(StepStats { loss_photo, loss_sketch, zero_fraction })
}

/// Initial trainable set: backbone weights plus a `K_b × d` cosine head.
pub fn initial_params(backbone: &Backbone, num_classes: usize, cfg: &Stage1Config) -> ParameterSet {
    let mut params = backbone.params().clone();
    let d = backbone.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let bound = 1.0 / (d as f64).sqrt();
    let head = (0..num_classes * d).map(|_| rng.gen_range(-bound..bound)).collect();
    params.insert(HEAD, DenseArray::new(vec![num_classes, d], head).expect("head shape"));
    if cfg.learnable_scale {
        params.insert(HEAD_SCALE, DenseArray::scalar(cfg.scale));
    }
    params
}

fn head_of(params: &ParameterSet, classes: &[ClassId], cfg: &Stage1Config) -> Result<ClassifierWeights> {
    let scale = if cfg.learnable_scale { params.get(HEAD_SCALE)?.values()[0] } else { cfg.scale };
    ClassifierWeights::new(params.get(HEAD)?.clone(), classes.to_vec(), scale)
}

/// Trains backbone and base head on the base-class training items of both domains.
pub fn train_stage1(dataset: &Dataset, split: &ClassSplit, backbone_cfg: &BackboneConfig, cfg: &Stage1Config) -> Result<Stage1Output> {
    cfg.validate()?;
    if split.base.is_empty() {
        return Err(Error::InsufficientData("no base classes".into()));
    }
    let by_domain = |items: &[usize], d: Domain| items.iter().copied().filter(|&i| dataset.item(i).domain == d).collect::<Vec<_>>();
    let photos = by_domain(&split.base_train, Domain::Photo);
    let sketches = by_domain(&split.base_train, Domain::Sketch);
    let val_photos = by_domain(&split.base_val, Domain::Photo);
    let val_sketches = by_domain(&split.base_val, Domain::Sketch);
    let steps = photos.len().min(sketches.len()) / cfg.batch_size;
    if steps == 0 {
        return Err(Error::InsufficientData(format!(
            "base training split has {} photos and {} sketches, batch size {}",
            photos.len(),
            sketches.len(),
            cfg.batch_size
        )));
    }

    let backbone = Backbone::new(backbone_cfg.clone(), cfg.seed)?;
    let classes = &split.base;
    let mut params = initial_params(&backbone, classes.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut p, mut s) = (photos.clone(), sketches.clone());
        p.shuffle(&mut rng);
        s.shuffle(&mut rng);
        let (mut lp, mut ls, mut zf) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let r = step * cfg.batch_size..(step + 1) * cfg.batch_size;
            let pb = Batch::from_items(&backbone, dataset, &p[r.clone()], classes)?;
            let sb = Batch::from_items(&backbone, dataset, &s[r], classes)?;
            let stats = stage1_step(&mut params, &backbone, &pb, &sb, cfg).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at stage-1 epoch {epoch} step {step}")),
                other => other,
            })?;
            lp += stats.loss_photo;
            ls += stats.loss_sketch;
            zf += stats.zero_fraction;
        }
        let current = Backbone::from_params(backbone_cfg.clone(), params.clone())?;
        let head = head_of(&params, classes, cfg)?;
        let n = steps as f64;
        let record = Stage1Epoch {
            epoch,
            loss_photo: lp / n,
            loss_sketch: ls / n,
            zero_fraction: zf / n,
            val_photo_acc: accuracy(&current, &head, dataset, &val_photos)?,
            val_sketch_acc: accuracy(&current, &head, dataset, &val_sketches)?,
        };
        log::info!("{record}");
        history.push(record);
    }
    Ok(Stage1Output {
        backbone: Backbone::from_params(backbone_cfg.clone(), params.clone())?,
        base: head_of(&params, classes, cfg)?,
        history,
    })
}
