//! Sign-agreement merge of two per-domain gradient sets.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numeric::{check_compatible, DenseArray, GradTag, GradientSet};

/// Three-valued sign with `sig(0) = 0`.
fn sig(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Per-parameter 0/1 masks marking components whose signs agree.
#[derive(Debug, Clone, PartialEq)]
pub struct SignMask {
    masks: BTreeMap<String, DenseArray>,
}

impl SignMask {
    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.masks.iter()
    }

    pub fn numel(&self) -> usize {
        self.masks.values().map(DenseArray::len).sum()
    }

    /// Fraction of components set to zero by the merge.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.numel();
        if total == 0 {
            return 0.0;
        }
        let kept: f64 = self.masks.values().flat_map(|m| m.values()).sum();
        1.0 - kept / total as f64
    }
}

pub fn sign_agreement(a: &GradientSet, b: &GradientSet) -> Result<SignMask> {
    check_compatible(a, b)?;
    let masks = a
        .iter()
        .map(|(name, ga)| {
            let gb = b.get(name).expect("keys checked");
            let m = ga.values().iter().zip(gb.values()).map(|(x, y)| if sig(*x) == sig(*y) { 1.0 } else { 0.0 });
            (name.clone(), DenseArray::new(ga.shape().to_vec(), m.collect()).expect("same shape"))
        })
        .collect();
    Ok(SignMask { masks })
}

/// `a + b` where the signs agree, `0` elsewhere.
pub fn consensus_merge(a: &GradientSet, b: &GradientSet) -> Result<GradientSet> {
    Ok(consensus_merge_with_mask(a, b)?.0)
}

pub fn consensus_merge_with_mask(a: &GradientSet, b: &GradientSet) -> Result<(GradientSet, SignMask)> {
    let mask = sign_agreement(a, b)?;
    let mut merged = GradientSet::new(GradTag::Merged);
    for (name, ga) in a.iter() {
        let gb = b.get(name).expect("keys checked");
        let m = mask.get(name).expect("mask per key");
        let v = ga
            .values()
            .iter()
            .zip(gb.values())
            .zip(m.values())
            .map(|((x, y), k)| if *k == 1.0 { x + y } else { 0.0 })
            .collect();
        merged.insert(name.clone(), DenseArray::new(ga.shape().to_vec(), v)?);
    }
    Ok((merged, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[f64]) -> GradientSet {
        let mut g = GradientSet::new(GradTag::Photo);
        g.insert("p", DenseArray::vector(v.to_vec()));
        g
    }

    #[test]
    fn mixed_signs() {
        let (a, b) = (set(&[1.0, -2.0, 0.5]), set(&[2.0, 1.0, -0.5]));
        assert_eq!(sign_agreement(&a, &b).unwrap().get("p").unwrap().values(), &[1.0, 0.0, 0.0]);
        let m = consensus_merge(&a, &b).unwrap();
        assert_eq!(m.get("p").unwrap().values(), &[3.0, 0.0, 0.0]);
        assert_eq!(m.tag, GradTag::Merged);
    }

    #[test]
    fn zero_conflicts_with_nonzero() {
        let mask = sign_agreement(&set(&[0.0, 1.0]), &set(&[0.5, 1.0])).unwrap();
        assert_eq!(mask.get("p").unwrap().values(), &[0.0, 1.0]);
        assert_eq!(mask.zero_fraction(), 0.5);
    }

    #[test]
    fn self_and_negation() {
        let g = set(&[1.5, -0.25, 3.0, 0.0]);
        assert!(sign_agreement(&g, &g).unwrap().get("p").unwrap().values().iter().all(|&m| m == 1.0));
        assert_eq!(consensus_merge(&g, &g).unwrap().get("p").unwrap(), g.scaled(2.0).get("p").unwrap());
        let neg = g.scaled(-1.0);
        let m = consensus_merge(&g, &neg).unwrap();
        // the shared zero component agrees and stays 0 + 0
        assert!(m.get("p").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_keys_rejected() {
        let mut other = GradientSet::new(GradTag::Sketch);
        other.insert("q", DenseArray::vector(vec![1.0]));
        assert!(consensus_merge(&set(&[1.0]), &other).is_err());
    }
}
