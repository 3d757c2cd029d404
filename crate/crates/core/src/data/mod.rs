//! Two-domain labelled image data: synthetic generation, directory loading,
//! class splits and episode sampling.

mod episode;
mod loader;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numeric::DenseArray;

pub use episode::{sample_episode, Episode, SupportDomain};
pub use loader::{decode_image, load_directory};
pub use split::{split_classes, ClassSplit, ItemSubset, SplitCounts, SplitPart};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Index of a class in a dataset's registry (lexicographic order of names).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Photo,
    Sketch,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Photo, Domain::Sketch];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Photo => "photo",
            Domain::Sketch => "sketch",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled image, `H×W×C` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: DenseArray,
    pub label: ClassId,
    pub domain: Domain,
}

/// Image geometry shared by every item of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn square(size: usize) -> Self {
        Self { height: size, width: size, channels: 3 }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Immutable collection of items from both domains.
#[derive(Debug, Clone)]
pub struct Dataset {
    class_names: Vec<String>,
    items: Vec<Item>,
    shape: ImageShape,
    by_class: BTreeMap<(ClassId, Domain), Vec<usize>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, items: Vec<Item>, shape: ImageShape) -> Self {
        let mut by_class: BTreeMap<(ClassId, Domain), Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            by_class.entry((item.label, item.domain)).or_default().push(i);
        }
        Self { class_names, items, shape, by_class }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.class_names.len()).map(ClassId)
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, index: usize) -> &Item {
        &self.items[index]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// Item indices of one class in one domain, in dataset order.
    pub fn indices(&self, class: ClassId, domain: Domain) -> &[usize] {
        self.by_class.get(&(class, domain)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.items.iter().filter(|i| i.domain == domain).count()
    }

    /// Classes that have no items at all in `domain`.
    pub fn empty_in(&self, domain: Domain) -> Vec<ClassId> {
        self.class_ids().filter(|&c| self.indices(c, domain).is_empty()).collect()
    }
}
