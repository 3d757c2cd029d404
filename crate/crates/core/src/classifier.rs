//! Cosine classifier: softmax over `s · cos(w_k, f)`.

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numeric::{DenseArray, Graph, Var};

pub const DEFAULT_SCALE: f64 = 10.0;

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

const MIN_NORM: f64 = 1e-12;

/// Class weight rows (`|C| × d`, stored unnormalised) with their class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    weights: DenseArray,
    class_ids: Vec<ClassId>,
    scale: f64,
}

impl ClassifierWeights {
    pub fn new(weights: DenseArray, class_ids: Vec<ClassId>, scale: f64) -> Result<Self> {
        if weights.shape().len() != 2 || weights.rows() != class_ids.len() {
            return Err(Error::Shape(format!(
                "weights {:?} for {} class ids",
                weights.shape(),
                class_ids.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("classifier scale must be positive, got {scale}")));
        }
        let mut sorted = class_ids.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("class id {} appears twice", w[0])));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self { weights, class_ids, scale })
    }

    pub fn weights(&self) -> &DenseArray {
        &self.weights
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn position(&self, id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == id)
    }

    /// Rows for `ids`, in that order.
    pub fn restricted(&self, ids: &[ClassId]) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|&id| self.position(id).ok_or_else(|| Error::Alignment(format!("class {id} not in classifier"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.select_rows(&rows)?, ids.to_vec(), self.scale)
    }

    pub fn normalized(&self) -> Result<DenseArray> {
        normalize_rows(&self.weights, &self.class_ids)
    }

    /// `s · cos(w_k, f)` for every class.
    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_batch(&[f])?.remove(0))
    }

    pub fn logits_batch(&self, fs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let w = self.normalized()?;
        fs.iter()
            .map(|f| {
                if f.len() != self.dim() {
                    return Err(Error::Shape(format!("embedding of length {} for {}-d classifier", f.len(), self.dim())));
                }
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= MIN_NORM || !norm.is_finite() {
                    return Err(Error::ZeroEmbedding);
                }
                let d = self.dim();
                Ok((0..self.num_classes())
                    .map(|k| {
                        let row = &w.values()[k * d..(k + 1) * d];
                        self.scale * row.iter().zip(*f).map(|(a, b)| a * (b / norm)).sum::<f64>()
                    })
                    .collect())
            })
            .collect()
    }

    pub fn predict(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(f)?))
    }
}

/// Unit-l2 rows; a (near-)zero row is reported with its class id.
pub fn normalize_rows(w: &DenseArray, class_ids: &[ClassId]) -> Result<DenseArray> {
    let mut out = w.clone();
    let n = w.cols();
    for i in 0..w.rows() {
        let row = &mut out.values_mut()[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= MIN_NORM {
            let who = class_ids.get(i).map(|c| format!("class {c}")).unwrap_or_else(|| format!("row {i}"));
            return Err(Error::ZeroRow(who));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::numeric::softmax_in_place(&mut p);
    p
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `H(target, pred) = −Σ target_i · ln max(pred_i, 1e-12)`.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("prediction of length {} vs target of length {}", pred.len(), target.len())));
    }
    for (name, v) in [("prediction", pred), ("target", target)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|&x| x < 0.0) {
            return Err(Error::Config(format!("{name} is not a distribution (sums to {sum})")));
        }
    }
    Ok(-pred.iter().zip(target).map(|(p, t)| if *t == 0.0 { 0.0 } else { t * p.max(LOG_CLAMP).ln() }).sum::<f64>())
}

/// Cosine logits on the tape: `scale · normalize(f) · normalize(w)ᵀ`, `f` is `N × d`, `w` is `K × d`.
pub fn cosine_logits(g: &mut Graph, f: Var, w: Var, scale: f64) -> Result<Var> {
    let cos = cosine(g, f, w)?;
    Ok(g.scale(cos, scale))
}

/// As [`cosine_logits`] with the scale read from a one-element node.
pub fn cosine_logits_learnable(g: &mut Graph, f: Var, w: Var, scale: Var) -> Result<Var> {
    let cos = cosine(g, f, w)?;
    g.mul_scalar(cos, scale)
}

fn cosine(g: &mut Graph, f: Var, w: Var) -> Result<Var> {
    let f = g.normalize_rows(f).map_err(|e| match e {
        Error::ZeroRow(_) => Error::ZeroEmbedding,
        other => other,
    })?;
    let w = g.normalize_rows(w)?;
    g.matmul_t(f, w)
}
