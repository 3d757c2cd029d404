//! Procedural two-domain shape dataset.
//!
//! Every class is a polygon family (vertex count, star indentation, aspect,
//! rotation offset). Both domains draw per-item geometry from the same family:
//! photos are filled, textured and coloured on a cluttered background with a
//! darker rim; sketches are dark strokes tracing the outline on a white background.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, Domain, ImageShape, Item};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

const VERTEX_COUNTS: [usize; 6] = [3, 4, 5, 6, 7, 8];
const INDENTS: [f64; 2] = [1.0, 0.5];
const ASPECTS: [f64; 2] = [1.0, 0.6];
const ROTATIONS: [f64; 2] = [0.0, 0.5];

/// Number of distinct shape families the generator can render.
pub const MAX_SYNTHETIC_CLASSES: usize =
    VERTEX_COUNTS.len() * INDENTS.len() * ASPECTS.len() * ROTATIONS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 30, per_class_per_domain: 80, image_size: 16, seed: 7 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 10 || self.classes > MAX_SYNTHETIC_CLASSES {
            return Err(Error::Config(format!(
                "synthetic classes must be in 10..={MAX_SYNTHETIC_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.per_class_per_domain < 30 {
            return Err(Error::Config(format!(
                "per_class_per_domain must be at least 30, got {}",
                self.per_class_per_domain
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} is too small to render strokes (minimum 16)",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: std::num::ParseIntError| Error::Config(format!("{key}={value}: {e}"));
        match key.trim() {
            "classes" => self.classes = value.trim().parse().map_err(bad)?,
            "per_class_per_domain" | "per_class" => self.per_class_per_domain = value.trim().parse().map_err(bad)?,
            "image_size" => self.image_size = value.trim().parse().map_err(bad)?,
            "seed" => self.seed = value.trim().parse().map_err(bad)?,
            other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
        }
        Ok(())
    }
}

/// Parses `key=value` lines; `#` starts a comment. Unset keys keep their defaults.
impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            spec.set(k, v)?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy)]
struct Family {
    vertices: usize,
    indent: f64,
    aspect: f64,
    rotation: f64,
}

fn family(class: usize) -> Family {
    let v = class % VERTEX_COUNTS.len();
    let rest = class / VERTEX_COUNTS.len();
    Family {
        vertices: VERTEX_COUNTS[v],
        indent: INDENTS[rest % 2],
        aspect: ASPECTS[(rest / 2) % 2],
        rotation: ROTATIONS[(rest / 4) % 2],
    }
}

/// Renders `classes × per_class_per_domain` items in each domain, deterministically per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let shape = ImageShape::square(s);
    let names = (0..spec.classes).map(|c| format!("shape_{c:02}")).collect();
    let mut items = Vec::with_capacity(spec.classes * spec.per_class_per_domain * 2);
    for class in 0..spec.classes {
        let fam = family(class);
        for domain in Domain::ALL {
            for _ in 0..spec.per_class_per_domain {
                let outline = sample_outline(&fam, s, &mut rng);
                let pixels = match domain {
                    Domain::Photo => render_photo(&outline, s, &mut rng),
                    Domain::Sketch => render_sketch(&outline, s, &mut rng),
                };
                items.push(Item {
                    image: DenseArray::new(vec![s, s, 3], pixels)?,
                    label: ClassId(class),
                    domain,
                });
            }
        }
    }
    Ok(Dataset::new(names, items, shape))
}

fn sample_outline(fam: &Family, size: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let radius = s * rng.gen_range(0.30..0.40);
    let step = 2.0 * PI / fam.vertices as f64;
    let rot = -PI / 2.0 + fam.rotation * step + rng.gen_range(-0.12..0.12);
    let n = if fam.indent < 1.0 { fam.vertices * 2 } else { fam.vertices };
    (0..n)
        .map(|k| {
            let ratio = if k % 2 == 1 && fam.indent < 1.0 { fam.indent } else { 1.0 };
            let r = radius * ratio * rng.gen_range(0.92..1.08);
            let a = rot + 2.0 * PI * k as f64 / n as f64;
            (cx + r * a.cos() * fam.aspect, cy + r * a.sin())
        })
        .collect()
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            odd = !odd;
        }
        j = i;
    }
    odd
}

fn boundary_distance(poly: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..poly.len() {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (ax + t * dx, ay + t * dy);
        best = best.min(((x - px).powi(2) + (y - py).powi(2)).sqrt());
    }
    best
}

fn render_photo(outline: &[(f64, f64)], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.55));
    let grad_dir = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (grad_dir.cos(), grad_dir.sin());
    let freq = rng.gen_range(0.6..1.4);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let s = size as f64;
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade = 0.08 * ((px * gx + py * gy) / s - 0.5);
            let is_in = inside(outline, px, py);
            let rim = (1.2 - boundary_distance(outline, px, py)).clamp(0.0, 1.0);
            let stripes = 0.07 * (freq * (px + py) + phase).sin();
            for c in 0..3 {
                let base = if is_in { fg[c] + stripes } else { bg[c] + shade };
                let v = base * (1.0 - 0.6 * rim) + rng.gen_range(-0.05..0.05);
                out[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn render_sketch(outline: &[(f64, f64)], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let wobble = 0.04 * size as f64;
    let traced: Vec<(f64, f64)> = outline
        .iter()
        .map(|&(x, y)| (x + rng.gen_range(-wobble..wobble), y + rng.gen_range(-wobble..wobble)))
        .collect();
    let half_width = rng.gen_range(0.45..0.85);
    let ink = rng.gen_range(0.75..1.0);
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let d = boundary_distance(&traced, x as f64 + 0.5, y as f64 + 0.5);
            let coverage = (1.0 - (d - half_width)).clamp(0.0, 1.0);
            let v = (1.0 - ink * coverage + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            for c in 0..3 {
                out[(y * size + x) * 3 + c] = v;
            }
        }
    }
    out
}
