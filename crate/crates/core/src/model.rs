//! A trained pipeline: frozen backbone, base classifier and weight generator.

use crate::backbone::{Embedding, FrozenBackbone};
use crate::classifier::ClassifierWeights;
use crate::data::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::generator::WeightGenerator;

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: FrozenBackbone,
    pub base: ClassifierWeights,
    pub generator: WeightGenerator,
}

impl Model {
    /// `W_new` over the base classes followed by one row per support class.
    pub fn increment(&self, support: &[(ClassId, Vec<Embedding>)]) -> Result<ClassifierWeights> {
        self.generator.generate(&self.base, support)
    }

    pub fn with_generator(&self, generator: WeightGenerator) -> Self {
        Self { backbone: self.backbone.clone(), base: self.base.clone(), generator }
    }
}

/// Embeddings of dataset items under one frozen backbone, indexed by item.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: Vec<Option<Embedding>>,
}

impl EmbeddingTable {
    pub fn new(len: usize) -> Self {
        Self { rows: vec![None; len] }
    }

    /// Embeds every item of the dataset.
    pub fn build(backbone: &FrozenBackbone, dataset: &Dataset) -> Result<Self> {
        let mut t = Self::new(dataset.len());
        t.fill(backbone, dataset, 0..dataset.len())?;
        Ok(t)
    }

    /// Embeds the listed items that are not in the table yet.
    pub fn fill(&mut self, backbone: &FrozenBackbone, dataset: &Dataset, items: impl IntoIterator<Item = usize>) -> Result<()> {
        let missing: Vec<usize> = items.into_iter().filter(|&i| self.rows[i].is_none()).collect();
        let images: Vec<_> = missing.iter().map(|&i| &dataset.item(i).image).collect();
        for (i, e) in missing.iter().zip(backbone.embed_batch(&images)?) {
            self.rows[*i] = Some(e);
        }
        Ok(())
    }

    /// Stores an embedding computed elsewhere.
    pub fn set(&mut self, item: usize, embedding: Embedding) -> Result<()> {
        let len = self.rows.len();
        let slot = self.rows.get_mut(item).ok_or_else(|| Error::InsufficientData(format!("item {item} is outside a table of {len}")))?;
        *slot = Some(embedding);
        Ok(())
    }

    pub fn get(&self, item: usize) -> Result<&Embedding> {
        self.rows
            .get(item)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InsufficientData(format!("item {item} has not been embedded")))
    }

    pub fn gather(&self, items: &[usize]) -> Result<Vec<Embedding>> {
        items.iter().map(|&i| self.get(i).cloned()).collect()
    }
}
