//! End-to-end training: split, stage 1, freeze, stage 2.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::{split_classes, ClassSplit, Dataset, SplitCounts};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, WeightGenerator};
use crate::model::{EmbeddingTable, Model};
use crate::training::{train_stage1, train_stage2, Stage1Config, Stage1Epoch, Stage2Config, Stage2Epoch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub counts: SplitCounts,
    pub split_seed: u64,
    pub backbone: BackboneConfig,
    pub stage1: Stage1Config,
    pub generator: GeneratorConfig,
    pub stage2: Stage2Config,
}

impl PipelineConfig {
    /// Settings sized for a single CPU core on the synthetic data.
    pub fn desk_scale() -> Self {
        Self {
            counts: SplitCounts { base: 10, val: 5, novel: 15 },
            split_seed: 0,
            backbone: BackboneConfig::default(),
            stage1: Stage1Config::default(),
            generator: GeneratorConfig::default(),
            stage2: Stage2Config { epochs: 100, lr: 0.3, ..Default::default() },
        }
    }

    /// Sets every seed that drives training from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub split: ClassSplit,
    pub model: Model,
    pub table: EmbeddingTable,
    pub stage1_history: Vec<Stage1Epoch>,
    pub stage2_history: Vec<Stage2Epoch>,
}

impl Trained {
    pub fn checkpoint(&self, dataset: &Dataset, cfg: &PipelineConfig, data: Option<String>) -> Result<Checkpoint> {
        let meta = TrainingMeta {
            data,
            split: Some(self.split.clone()),
            stage1: Some(cfg.stage1.clone()),
            stage2: Some(cfg.stage2.clone()),
            stage1_history: self.stage1_history.clone(),
            stage2_history: self.stage2_history.clone(),
            dataset_classes: dataset.num_classes(),
        };
        Checkpoint::from_model(&self.model, dataset.class_names(), meta)
    }

    /// Rebuilds a trained pipeline from a checkpoint and the dataset it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let split = ckpt.meta.split.clone().ok_or_else(|| Error::Format("checkpoint carries no class split".into()))?;
        if ckpt.meta.dataset_classes != dataset.num_classes() {
            return Err(Error::Alignment(format!(
                "checkpoint was trained on {} classes, dataset has {}",
                ckpt.meta.dataset_classes,
                dataset.num_classes()
            )));
        }
        let model = ckpt.model()?;
        let table = EmbeddingTable::build(&model.backbone, dataset)?;
        Ok(Self {
            split,
            model,
            table,
            stage1_history: ckpt.meta.stage1_history.clone(),
            stage2_history: ckpt.meta.stage2_history.clone(),
        })
    }
}

/// Stage 1 only; the generator is freshly initialised.
pub fn pretrain(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Trained> {
    let split = split_classes(dataset, cfg.counts, cfg.split_seed)?;
    let out = train_stage1(dataset, &split, &cfg.backbone, &cfg.stage1)?;
    let backbone = out.backbone.freeze();
    let table = EmbeddingTable::build(&backbone, dataset)?;
    let generator_cfg = GeneratorConfig { dim: cfg.backbone.embedding_dim, ..cfg.generator.clone() };
    let generator = WeightGenerator::new(generator_cfg, cfg.stage2.seed)?;
    Ok(Trained {
        split,
        model: Model { backbone, base: out.base, generator },
        table,
        stage1_history: out.history,
        stage2_history: Vec::new(),
    })
}

/// Stage 2 on top of a pretrained model.
pub fn train_generator(dataset: &Dataset, pre: &Trained, generator: GeneratorConfig, cfg: &Stage2Config) -> Result<Trained> {
    let init = WeightGenerator::new(GeneratorConfig { dim: pre.model.base.dim(), ..generator }, cfg.seed)?;
    let out = train_stage2(&pre.model.backbone, &pre.model.base, init, dataset, &pre.split, &pre.table, cfg)?;
    let mut trained = pre.clone();
    if let Some(bb) = out.backbone {
        trained.model.backbone = bb.freeze();
        trained.table = EmbeddingTable::build(&trained.model.backbone, dataset)?;
    }
    trained.model.generator = out.generator;
    trained.stage2_history = out.history;
    Ok(trained)
}

pub fn train(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Trained> {
    let pre = pretrain(dataset, cfg)?;
    train_generator(dataset, &pre, cfg.generator.clone(), &cfg.stage2)
}
