use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{ClassId, Dataset, Domain, ImageShape, Item};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

/// Decodes a raster image into an `H×W×3` array in `[0, 1]`, resizing when `size` is given.
pub fn decode_image(bytes: &[u8], size: Option<(usize, usize)>) -> std::result::Result<DenseArray, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(image_to_array(img, size))
}

pub(crate) fn image_to_array(img: image::DynamicImage, size: Option<(usize, usize)>) -> DenseArray {
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            img.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let values = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    DenseArray::new(vec![h, w, 3], values).expect("rgb buffer matches its dimensions")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `root/{photo,sketch}/<class>/<image>` into a dataset.
///
/// Class ids follow the lexicographic order of class folder names across both
/// domains. A class present in one domain only is kept (with a warning). When
/// `size` is `None` every image must share the first image's dimensions.
pub fn load_directory(root: &Path, size: Option<(usize, usize)>) -> Result<Dataset> {
    let mut names = BTreeSet::new();
    for domain in Domain::ALL {
        let dir = root.join(domain.as_str());
        if dir.is_dir() {
            for p in sorted_entries(&dir)? {
                if p.is_dir() {
                    if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                        names.insert(n.to_string());
                    }
                }
            }
        }
    }
    if names.is_empty() {
        return Err(Error::NoClasses(root.to_path_buf()));
    }
    let names: Vec<String> = names.into_iter().collect();

    let mut shape = size;
    let mut items = Vec::new();
    for (class, name) in names.iter().enumerate() {
        for domain in Domain::ALL {
            let dir = root.join(domain.as_str()).join(name);
            if !dir.is_dir() {
                log::warn!("class `{name}` has no {domain} folder; keeping it with zero {domain} items");
                continue;
            }
            for path in sorted_entries(&dir)? {
                if !path.is_file() {
                    continue;
                }
                let img = image::open(&path)
                    .map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })?;
                let (h, w) = (img.height() as usize, img.width() as usize);
                let target = *shape.get_or_insert((h, w));
                if size.is_none() && (h, w) != target {
                    return Err(Error::Image {
                        path,
                        reason: format!("size {h}x{w} differs from dataset size {}x{}", target.0, target.1),
                    });
                }
                items.push(Item { image: image_to_array(img, Some(target)), label: ClassId(class), domain });
            }
        }
    }
    let (height, width) = shape.unwrap_or((1, 1));
    Ok(Dataset::new(names, items, ImageShape { height, width, channels: 3 }))
}
