use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, Domain};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub base: usize,
    pub val: usize,
    pub novel: usize,
}

/// Item subsets of the base classes (60/20/20 per class and domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemSubset {
    Train,
    Val,
    Test,
}

/// Which classes and items an episode may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPart {
    Base(ItemSubset),
    Val,
    Novel,
}

/// Disjoint base/val/novel classes plus the base-class item subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<ClassId>,
    pub val: Vec<ClassId>,
    pub novel: Vec<ClassId>,
    pub base_train: Vec<usize>,
    pub base_val: Vec<usize>,
    pub base_test: Vec<usize>,
}

impl ClassSplit {
    pub fn classes(&self, part: SplitPart) -> &[ClassId] {
        match part {
            SplitPart::Base(_) => &self.base,
            SplitPart::Val => &self.val,
            SplitPart::Novel => &self.novel,
        }
    }

    /// Indices of `class` items in `domain` that belong to `part`, in dataset order.
    pub fn items(&self, dataset: &Dataset, part: SplitPart, class: ClassId, domain: Domain) -> Vec<usize> {
        let all = dataset.indices(class, domain);
        match part {
            SplitPart::Base(subset) => {
                let keep = match subset {
                    ItemSubset::Train => &self.base_train,
                    ItemSubset::Val => &self.base_val,
                    ItemSubset::Test => &self.base_test,
                };
                all.iter().copied().filter(|i| keep.binary_search(i).is_ok()).collect()
            }
            SplitPart::Val | SplitPart::Novel => all.to_vec(),
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let b: BTreeSet<_> = self.base.iter().collect();
        let v: BTreeSet<_> = self.val.iter().collect();
        let n: BTreeSet<_> = self.novel.iter().collect();
        b.is_disjoint(&v) && b.is_disjoint(&n) && v.is_disjoint(&n)
    }
}

/// Randomly partitions classes into base/val/novel and splits base items 60/20/20.
pub fn split_classes(dataset: &Dataset, counts: SplitCounts, seed: u64) -> Result<ClassSplit> {
    let total = counts.base + counts.val + counts.novel;
    if total > dataset.num_classes() {
        return Err(Error::Config(format!(
            "split {}+{}+{} needs {total} classes, dataset has {}",
            counts.base,
            counts.val,
            counts.novel,
            dataset.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<ClassId> = dataset.class_ids().collect();
    ids.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| {
        let mut v = ids[range].to_vec();
        v.sort();
        v
    };
    let base = take(0..counts.base);
    let val = take(counts.base..counts.base + counts.val);
    let novel = take(counts.base + counts.val..total);

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &class in &base {
        for domain in Domain::ALL {
            let mut idx = dataset.indices(class, domain).to_vec();
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_train = n * 6 / 10;
            let n_val = n * 2 / 10;
            train.extend_from_slice(&idx[..n_train]);
            valid.extend_from_slice(&idx[n_train..n_train + n_val]);
            test.extend_from_slice(&idx[n_train + n_val..]);
        }
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(ClassSplit { base, val, novel, base_train: train, base_val: valid, base_test: test })
}
