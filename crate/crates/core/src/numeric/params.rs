use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DenseArray;
use crate::error::{Error, Result};

/// Which loss a gradient set was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTag {
    Photo,
    Sketch,
    Merged,
    Plain,
}

/// Per-parameter gradients of one scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tag: GradTag,
    grads: BTreeMap<String, DenseArray>,
}

impl GradientSet {
    pub fn new(tag: GradTag) -> Self {
        Self { tag, grads: BTreeMap::new() }
    }

    pub fn from_map(tag: GradTag, grads: BTreeMap<String, DenseArray>) -> Self {
        Self { tag, grads }
    }

    pub fn with_tag(mut self, tag: GradTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: DenseArray) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Total number of scalar components.
    pub fn numel(&self) -> usize {
        self.grads.values().map(DenseArray::len).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            tag: self.tag,
            grads: self.grads.iter().map(|(k, v)| (k.clone(), v.scaled(c))).collect(),
        }
    }

    /// Elementwise sum; both sets must have identical keys and shapes.
    pub fn sum(&self, other: &Self) -> Result<Self> {
        check_compatible(self, other)?;
        let grads = self
            .grads
            .iter()
            .map(|(k, a)| {
                let mut a = a.clone();
                a.add_assign(&other.grads[k]);
                (k.clone(), a)
            })
            .collect();
        Ok(Self { tag: GradTag::Plain, grads })
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_compatible(self, other)?;
        Ok(self.grads.iter().map(|(k, a)| a.dot(&other.grads[k])).sum())
    }

    pub fn l1_norm(&self) -> f64 {
        self.grads.values().map(DenseArray::l1_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(DenseArray::is_finite)
    }

    /// Copy restricted to the given names (missing names are skipped).
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Self {
        let grads = names
            .into_iter()
            .filter_map(|n| self.grads.get(n).map(|g| (n.to_string(), g.clone())))
            .collect();
        Self { tag: self.tag, grads }
    }
}

/// Fails unless both sets cover the same names with the same shapes.
pub fn check_compatible(a: &GradientSet, b: &GradientSet) -> Result<()> {
    let ka: Vec<_> = a.grads.keys().collect();
    let kb: Vec<_> = b.grads.keys().collect();
    if ka != kb {
        let only_a: Vec<_> = ka.iter().filter(|k| !b.grads.contains_key(k.as_str())).collect();
        let only_b: Vec<_> = kb.iter().filter(|k| !a.grads.contains_key(k.as_str())).collect();
        return Err(Error::Shape(format!(
            "gradient key sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    for (k, ga) in &a.grads {
        let gb = &b.grads[k];
        if !ga.same_shape(gb) {
            return Err(Error::Shape(format!(
                "gradient `{k}` shape {:?} vs {:?}",
                ga.shape(),
                gb.shape()
            )));
        }
    }
    Ok(())
}

/// Named parameter arrays with matching gradient buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, DenseArray>,
    grads: BTreeMap<String, DenseArray>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        let name = name.into();
        self.grads.insert(name.clone(), DenseArray::zeros(value.shape()));
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&DenseArray> {
        self.grads.get(name)
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds a gradient set into the buffers. Every name in `grads` must be a parameter here.
    pub fn accumulate(&mut self, grads: &GradientSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let buf = self.grads.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if !buf.same_shape(g) {
                return Err(Error::Shape(format!(
                    "gradient `{name}` shape {:?} vs parameter {:?}",
                    g.shape(),
                    buf.shape()
                )));
            }
            buf.add_assign(g);
        }
        Ok(())
    }

    /// Plain SGD on the accumulated buffers, which are cleared afterwards.
    pub fn sgd_step(&mut self, lr: f64) {
        for (name, p) in self.entries.iter_mut() {
            let g = &self.grads[name];
            for (v, d) in p.values_mut().iter_mut().zip(g.values()) {
                *v -= lr * d;
            }
        }
        self.zero_grads();
    }

    /// Zero gradients for every parameter, tagged `tag`.
    pub fn zero_gradient_set(&self, tag: GradTag) -> GradientSet {
        GradientSet::from_map(
            tag,
            self.entries.iter().map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape()))).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(DenseArray::is_finite)
    }

    /// Merges another set in, prefixing each of its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// True when every array is bitwise identical to `other`'s.
    pub fn bit_identical(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, v)| {
                other.entries.get(k).is_some_and(|o| {
                    o.shape() == v.shape()
                        && o.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_uses_accumulated_gradients() {
        let mut p = ParameterSet::new();
        p.insert("w", DenseArray::vector(vec![1.0, 2.0]));
        let mut g = GradientSet::new(GradTag::Plain);
        g.insert("w", DenseArray::vector(vec![10.0, -10.0]));
        p.accumulate(&g).unwrap();
        p.sgd_step(0.1);
        assert_eq!(p.get("w").unwrap().values(), &[0.0, 3.0]);
        assert_eq!(p.grad("w").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn accumulate_rejects_unknown_names() {
        let mut p = ParameterSet::new();
        p.insert("w", DenseArray::vector(vec![1.0]));
        let mut g = GradientSet::new(GradTag::Plain);
        g.insert("v", DenseArray::vector(vec![1.0]));
        assert!(matches!(p.accumulate(&g), Err(Error::UnknownParameter(n)) if n == "v"));
    }

    #[test]
    fn incompatible_sets_name_the_offenders() {
        let mut a = GradientSet::new(GradTag::Photo);
        a.insert("x", DenseArray::vector(vec![1.0]));
        let mut b = GradientSet::new(GradTag::Sketch);
        b.insert("y", DenseArray::vector(vec![1.0]));
        let msg = check_compatible(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("\"x\"") && msg.contains("\"y\""), "{msg}");
    }
}
