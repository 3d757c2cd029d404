use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy, softmax, ClassifierWeights};
use crate::data::ClassId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLosses {
    pub cls: f64,
    pub distil: f64,
    pub total: f64,
}

/// Classification loss of `student` on the query labels plus distillation of
/// the `teacher` posterior into the student's rows for the teacher's classes
/// (re-softmaxed over that subset), both averaged over all queries.
pub fn episode_losses(teacher: &ClassifierWeights, student: &ClassifierWeights, queries: &[(&[f64], ClassId)]) -> Result<EpisodeLosses> {
    if queries.is_empty() {
        return Err(Error::InsufficientData("episode has no queries".into()));
    }
    let cols = teacher
        .class_ids()
        .iter()
        .map(|&id| student.position(id).ok_or_else(|| Error::Alignment(format!("teacher class {id} has no student row"))))
        .collect::<Result<Vec<_>>>()?;
    let (mut cls, mut distil) = (0.0, 0.0);
    for &(f, label) in queries {
        let pos = student
            .position(label)
            .ok_or_else(|| Error::Alignment(format!("query label {label} is not a student class")))?;
        let logits = student.logits(f)?;
        let mut target = vec![0.0; logits.len()];
        target[pos] = 1.0;
        cls += cross_entropy(&softmax(&logits), &target)?;
        let sub: Vec<f64> = cols.iter().map(|&c| logits[c]).collect();
        distil += cross_entropy(&softmax(&sub), &teacher.predict(f)?)?;
    }
    let n = queries.len() as f64;
    let (cls, distil) = (cls / n, distil / n);
    Ok(EpisodeLosses { cls, distil, total: cls + distil })
}
