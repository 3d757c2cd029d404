//! Stage 1: cross-domain pretraining of the backbone and base head.
//! Stage 2: episodic pseudo-incremental training of the weight generator.

mod losses;
mod stage1;
mod stage2;

pub use losses::{episode_losses, EpisodeLosses};
pub use stage1::{
    batch_loss, initial_params, stage1_step, train_stage1, Batch, Stage1Config, Stage1Epoch, Stage1Output, StepStats,
    HEAD, HEAD_SCALE,
};
pub use stage2::{
    make_pseudo_episode, train_stage2, CmtMode, PseudoEpisode, Stage2Config, Stage2Epoch, Stage2Output, SupportPass,
};

use crate::backbone::Backbone;
use crate::classifier::{argmax, ClassifierWeights};
use crate::data::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

/// `N × K` one-hot rows; `classes` fixes the column order.
pub fn one_hot(labels: &[ClassId], classes: &[ClassId]) -> Result<DenseArray> {
    let k = classes.len();
    let mut t = vec![0.0; labels.len() * k];
    for (i, label) in labels.iter().enumerate() {
        let pos = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Alignment(format!("label {label} is not in the label space")))?;
        t[i * k + pos] = 1.0;
    }
    DenseArray::new(vec![labels.len().max(1), k.max(1)], t)
}

/// Top-1 accuracy of `head` on the given items (0 for an empty list).
pub fn accuracy(backbone: &Backbone, head: &ClassifierWeights, dataset: &Dataset, items: &[usize]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<_> = items.iter().map(|&i| &dataset.item(i).image).collect();
    let embeddings = backbone.embed_batch(&images)?;
    let mut correct = 0;
    for (e, &i) in embeddings.iter().zip(items) {
        let pred = head.class_ids()[argmax(&head.logits(e.values())?)];
        correct += usize::from(pred == dataset.item(i).label);
    }
    Ok(correct as f64 / items.len() as f64)
}
