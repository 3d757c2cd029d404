//! Where a dataset comes from, and a compact text form of it that checkpoints remember.

use std::path::{Path, PathBuf};

use fscil_core::data::{generate_synthetic, load_directory, Dataset, SyntheticSpec};
use fscil_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `root/{photo,sketch}/<class>/<image>`, resized to `size × size`.
    Directory { root: PathBuf, size: usize },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// Synthetic spec from an optional `key=value` file plus `key=value` overrides.
    pub fn synthetic(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut spec = match file {
            Some(p) => std::fs::read_to_string(p)?.parse()?,
            None => SyntheticSpec::default(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("`{o}`: expected key=value")))?;
            spec.set(k, v)?;
        }
        spec.validate()?;
        Ok(DataSource::Synthetic(spec))
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Directory { root, size } => load_directory(root, Some((*size, *size))),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DataSource::Directory { root, size } => format!("dir:size={size}:{}", root.display()),
            DataSource::Synthetic(s) => format!(
                "synthetic:classes={},per_class_per_domain={},image_size={},seed={}",
                s.classes, s.per_class_per_domain, s.image_size, s.seed
            ),
        }
    }

    /// Inverse of [`describe`](Self::describe).
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("synthetic:") {
            let mut spec = SyntheticSpec::default();
            for kv in rest.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("bad data descriptor `{text}`")))?;
                spec.set(k, v)?;
            }
            return Ok(DataSource::Synthetic(spec));
        }
        if let Some(rest) = text.strip_prefix("dir:size=") {
            let (size, root) = rest.split_once(':').ok_or_else(|| Error::Config(format!("bad data descriptor `{text}`")))?;
            let size = size.parse().map_err(|_| Error::Config(format!("bad image size in `{text}`")))?;
            return Ok(DataSource::Directory { root: PathBuf::from(root), size });
        }
        Err(Error::Config(format!("unknown data descriptor `{text}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        let s = DataSource::synthetic(None, &["classes=12".into(), "seed=3".into()]).unwrap();
        assert_eq!(DataSource::parse(&s.describe()).unwrap(), s);
        let d = DataSource::Directory { root: PathBuf::from("/data/a:b"), size: 32 };
        assert_eq!(DataSource::parse(&d.describe()).unwrap(), d);
        assert!(DataSource::parse("ftp://x").is_err());
        assert!(DataSource::synthetic(None, &["bogus=1".into()]).is_err());
    }
}
