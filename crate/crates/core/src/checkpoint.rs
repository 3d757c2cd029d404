//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "FSCILCK\0"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen      configs, class ids, registry, metadata, array index
//! arrays   ...       f64 values of every indexed array, in index order
//! sha256   32 bytes  over everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::classifier::ClassifierWeights;
use crate::data::{ClassId, ClassSplit};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, WeightGenerator};
use crate::model::Model;
use crate::numeric::{DenseArray, ParameterSet};
use crate::training::{Stage1Config, Stage1Epoch, Stage2Config, Stage2Epoch};

pub const MAGIC: &[u8; 8] = b"FSCILCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Base,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub display_name: String,
    pub origin: Origin,
    pub exemplar_count: usize,
}

/// Classes of the deployed classifier, in row order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

impl ClassRegistry {
    /// Base classes named from the dataset registry.
    pub fn from_base(ids: &[ClassId], names: &[String]) -> Result<Self> {
        let mut r = Self::default();
        for &id in ids {
            let name = names.get(id.0).ok_or_else(|| Error::Alignment(format!("class {id} has no name")))?;
            r.push(ClassEntry { class_id: id, display_name: name.clone(), origin: Origin::Base, exemplar_count: 0 })?;
        }
        Ok(r)
    }

    pub fn push(&mut self, entry: ClassEntry) -> Result<()> {
        if self.contains_name(&entry.display_name) {
            return Err(Error::Config(format!("class `{}` is already registered", entry.display_name)));
        }
        if self.entries.iter().any(|e| e.class_id == entry.class_id) {
            return Err(Error::Config(format!("class id {} is already registered", entry.class_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.display_name == name)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.class_id == id)
    }

    /// Smallest id above every id ever handed out, so ids are never reused.
    pub fn next_id(&self, reserved_below: usize) -> ClassId {
        let max = self.entries.iter().map(|e| e.class_id.0 + 1).max().unwrap_or(0);
        ClassId(max.max(reserved_below))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub data: Option<String>,
    pub split: Option<ClassSplit>,
    pub stage1: Option<Stage1Config>,
    pub stage2: Option<Stage2Config>,
    pub stage1_history: Vec<Stage1Epoch>,
    pub stage2_history: Vec<Stage2Epoch>,
    /// Number of classes in the training dataset registry.
    pub dataset_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone_config: BackboneConfig,
    pub backbone: ParameterSet,
    pub base: ClassifierWeights,
    pub generator_config: GeneratorConfig,
    pub generator: ParameterSet,
    /// Deployed classifier: base rows plus any registered classes.
    pub current: ClassifierWeights,
    pub registry: ClassRegistry,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    class_ids: Vec<ClassId>,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct ArrayIndex {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone_config: BackboneConfig,
    generator_config: GeneratorConfig,
    base: WeightsHeader,
    current: WeightsHeader,
    registry: ClassRegistry,
    meta: TrainingMeta,
    arrays: Vec<ArrayIndex>,
}

const BACKBONE: &str = "backbone/";
const GENERATOR: &str = "generator/";
const BASE_WEIGHTS: &str = "classifier/base";
const CURRENT_WEIGHTS: &str = "classifier/current";

impl Checkpoint {
    /// A checkpoint whose deployed classifier is the base classifier.
    pub fn from_model(model: &Model, class_names: &[String], meta: TrainingMeta) -> Result<Self> {
        Ok(Self {
            backbone_config: model.backbone.config().clone(),
            backbone: model.backbone.params().clone(),
            base: model.base.clone(),
            generator_config: model.generator.config().clone(),
            generator: model.generator.params().clone(),
            current: model.base.clone(),
            registry: ClassRegistry::from_base(model.base.class_ids(), class_names)?,
            meta,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model {
            backbone: Backbone::from_params(self.backbone_config.clone(), self.backbone.clone())?.freeze(),
            base: self.base.clone(),
            generator: WeightGenerator::from_params(self.generator_config.clone(), self.generator.clone())?,
        })
    }

    fn arrays(&self) -> BTreeMap<String, &DenseArray> {
        let mut out = BTreeMap::new();
        for (k, v) in self.backbone.iter() {
            out.insert(format!("{BACKBONE}{k}"), v);
        }
        for (k, v) in self.generator.iter() {
            out.insert(format!("{GENERATOR}{k}"), v);
        }
        out.insert(BASE_WEIGHTS.to_string(), self.base.weights());
        out.insert(CURRENT_WEIGHTS.to_string(), self.current.weights());
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.current.num_classes() != self.registry.len() {
            return Err(Error::Alignment(format!(
                "classifier has {} rows, registry {} entries",
                self.current.num_classes(),
                self.registry.len()
            )));
        }
        let arrays = self.arrays();
        let header = Header {
            backbone_config: self.backbone_config.clone(),
            generator_config: self.generator_config.clone(),
            base: WeightsHeader { class_ids: self.base.class_ids().to_vec(), scale: self.base.scale() },
            current: WeightsHeader { class_ids: self.current.class_ids().to_vec(), scale: self.current.scale() },
            registry: self.registry.clone(),
            meta: self.meta.clone(),
            arrays: arrays.iter().map(|(k, v)| ArrayIndex { name: k.clone(), shape: v.shape().to_vec() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 8 * arrays.values().map(|a| a.len()).sum::<usize>() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in arrays.values() {
            out.extend_from_slice(&a.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < 20 + 32 {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| Error::Format("header length".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;

        let mut arrays = BTreeMap::new();
        let mut offset = header_end;
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if end > body.len() {
                return Err(Error::Format(format!("array `{}` runs past the end of the file", entry.name)));
            }
            let values = body[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(entry.name.clone(), DenseArray::new(entry.shape.clone(), values)?);
            offset = end;
        }
        if offset != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after arrays", body.len() - offset)));
        }
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Format(format!("missing array `{name}`")));
        let base = ClassifierWeights::new(take(BASE_WEIGHTS)?, header.base.class_ids, header.base.scale)?;
        let current = ClassifierWeights::new(take(CURRENT_WEIGHTS)?, header.current.class_ids, header.current.scale)?;
        let (mut backbone, mut generator) = (ParameterSet::new(), ParameterSet::new());
        for (name, value) in arrays {
            if let Some(rest) = name.strip_prefix(BACKBONE) {
                backbone.insert(rest, value);
            } else if let Some(rest) = name.strip_prefix(GENERATOR) {
                generator.insert(rest, value);
            } else {
                return Err(Error::Format(format!("unexpected array `{name}`")));
            }
        }
        if current.num_classes() != header.registry.len() {
            return Err(Error::Alignment("registry length differs from classifier rows".into()));
        }
        Ok(Self {
            backbone_config: header.backbone_config,
            backbone,
            base,
            generator_config: header.generator_config,
            generator,
            current,
            registry: header.registry,
            meta: header.meta,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// First 12 hex digits of a checkpoint hash.
pub fn short_hash(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
