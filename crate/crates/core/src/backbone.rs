//! Convolutional feature extractor with global average pooling.
//!
//! `widths.len()` conv blocks (conv → activation, followed by 2×2 average
//! pooling on every block but the last), then global average pooling and a
//! linear projection to `embedding_dim`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::numeric::{Activation, DenseArray, Graph, ParameterSet, Var};

/// Prefix of every backbone parameter name.
pub const PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input: ImageShape,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: ImageShape::square(16),
            widths: vec![8, 16, 32],
            kernel: 3,
            embedding_dim: 64,
            activation: Activation::Relu,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::Config(format!("embedding_dim must be ≥ 8, got {}", self.embedding_dim)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone needs at least one conv block with positive width".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        let stride = self.total_stride();
        if !self.input.height.is_multiple_of(stride) || !self.input.width.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by pooling stride {stride}",
                self.input.height, self.input.width
            )));
        }
        Ok(())
    }

    /// Product of the pooling strides between conv blocks.
    pub fn total_stride(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// A feature vector `f = F(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub DenseArray);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.l2_norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParameterSet,
}

fn conv_name(i: usize, what: &str) -> String {
    format!("{PREFIX}conv{i}.{what}")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> DenseArray {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseArray::new(shape.to_vec(), v).expect("shape matches generated values")
}

impl Backbone {
    /// Fan-in scaled uniform initialisation, zero biases.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match config.activation {
            Activation::Tanh => 3.0,
            Activation::Relu | Activation::Softplus => 6.0,
        };
        let mut params = ParameterSet::new();
        let mut in_ch = config.input.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let fan_in = (in_ch * config.kernel * config.kernel) as f64;
            params.insert(conv_name(i, "weight"), uniform(&mut rng, &[w, in_ch, config.kernel, config.kernel], (gain / fan_in).sqrt()));
            params.insert(conv_name(i, "bias"), DenseArray::zeros(&[w]));
            in_ch = w;
        }
        let fan_in = in_ch as f64;
        params.insert(format!("{PREFIX}fc.weight"), uniform(&mut rng, &[in_ch, config.embedding_dim], (3.0 / fan_in).sqrt()));
        params.insert(format!("{PREFIX}fc.bias"), DenseArray::zeros(&[config.embedding_dim]));
        Ok(Self { config, params })
    }

    /// Rebuilds a backbone from stored parameters, checking every expected array.
    pub fn from_params(config: BackboneConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        let mut own = ParameterSet::new();
        for (name, value) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != value.shape() {
                return Err(Error::Shape(format!("`{name}` is {:?}, config expects {:?}", got.shape(), value.shape())));
            }
            own.insert(name.clone(), got.clone());
        }
        Ok(Self { config, params: own })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Records the forward pass of an `N×C×H×W` batch on `g`, reading weights
    /// from `params` (which may hold more than the backbone's own entries).
    /// With `trainable = false` the weights enter as constants.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var, trainable: bool) -> Result<Var> {
        let get = |g: &mut Graph, name: String| if trainable { g.param(params, &name) } else { g.frozen(params, &name) };
        let mut h = x;
        let last = self.config.widths.len() - 1;
        for i in 0..=last {
            let w = get(g, conv_name(i, "weight"))?;
            let b = get(g, conv_name(i, "bias"))?;
            h = g.conv2d(h, w, b)?;
            h = g.activation(h, self.config.activation);
            if i < last {
                h = g.avg_pool2(h)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let w = get(g, format!("{PREFIX}fc.weight"))?;
        let b = get(g, format!("{PREFIX}fc.bias"))?;
        let z = g.matmul(pooled, w)?;
        g.add_row_bias(z, b)
    }

    /// Packs `H×W×C` images into one `N×C×H×W` array.
    pub fn batch(&self, images: &[&DenseArray]) -> Result<DenseArray> {
        let s = self.config.input;
        let expect = [s.height, s.width, s.channels];
        let hw = s.height * s.width;
        let mut out = vec![0.0; images.len() * s.channels * hw];
        for (n, img) in images.iter().enumerate() {
            if img.shape() != expect {
                return Err(Error::Shape(format!("image shape {:?}, backbone expects {expect:?}", img.shape())));
            }
            let src = img.values();
            for p in 0..hw {
                for c in 0..s.channels {
                    out[(n * s.channels + c) * hw + p] = src[p * s.channels + c];
                }
            }
        }
        DenseArray::new(vec![images.len(), s.channels, s.height, s.width], out)
    }

    pub fn embed(&self, image: &DenseArray) -> Result<Embedding> {
        Ok(self.embed_batch(&[image])?.remove(0))
    }

    pub fn embed_batch(&self, images: &[&DenseArray]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(self.batch(chunk)?);
            let e = self.forward(&mut g, &self.params, x, false)?;
            let e = g.value(e);
            for i in 0..chunk.len() {
                out.push(Embedding(DenseArray::vector(e.row(i).to_vec())));
            }
        }
        Ok(out)
    }

    /// Read-only view whose parameters can no longer change.
    pub fn freeze(self) -> FrozenBackbone {
        FrozenBackbone(Arc::new(self))
    }
}

/// Backbone with its weights fixed; cheap to clone and share between threads.
#[derive(Debug, Clone)]
pub struct FrozenBackbone(Arc<Backbone>);

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        self.0.config()
    }

    pub fn params(&self) -> &ParameterSet {
        self.0.params()
    }

    pub fn inner(&self) -> &Backbone {
        &self.0
    }

    pub fn embed(&self, image: &DenseArray) -> Result<Embedding> {
        self.0.embed(image)
    }

    pub fn embed_batch(&self, images: &[&DenseArray]) -> Result<Vec<Embedding>> {
        self.0.embed_batch(images)
    }

    /// Mutable copy for runs that keep training the backbone.
    pub fn thaw(&self) -> Backbone {
        (*self.0).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference, forward_backward};

    fn image(seed: u64, s: &ImageShape) -> DenseArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, &s.dims(), 1.0).map(|v| v.abs())
    }

    #[test]
    fn zero_image_through_zero_head_is_zero() {
        let mut bb = Backbone::new(BackboneConfig::default(), 1).unwrap();
        for name in ["backbone.fc.weight", "backbone.fc.bias"] {
            bb.params_mut().get_mut(name).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let zero = DenseArray::zeros(&[16, 16, 3]);
        let e = bb.embed(&zero).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
        assert_eq!(e.dim(), 64);
    }

    #[test]
    fn embedding_is_deterministic() {
        let bb = Backbone::new(BackboneConfig::default(), 2).unwrap();
        let img = image(3, &bb.config().input);
        assert_eq!(bb.embed(&img).unwrap(), bb.embed(&img).unwrap());
        assert_eq!(Backbone::new(BackboneConfig::default(), 2).unwrap(), bb);
    }

    #[test]
    fn batch_matches_single_calls_bitwise() {
        let bb = Backbone::new(BackboneConfig::default(), 4).unwrap();
        let imgs: Vec<_> = (0..8).map(|i| image(10 + i, &bb.config().input)).collect();
        let refs: Vec<_> = imgs.iter().collect();
        let batch = bb.embed_batch(&refs).unwrap();
        for (img, e) in imgs.iter().zip(&batch) {
            let single = bb.embed(img).unwrap();
            assert_eq!(single.0.to_le_bytes(), e.0.to_le_bytes());
        }
        let one = bb.embed_batch(&refs[..1]).unwrap();
        assert_eq!(one[0], bb.embed(&imgs[0]).unwrap());
        let reversed: Vec<_> = refs.iter().rev().copied().collect();
        let rev = bb.embed_batch(&reversed).unwrap();
        assert!(rev.iter().rev().zip(&batch).all(|(a, b)| a == b));
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let bb = Backbone::new(BackboneConfig::default(), 0).unwrap();
        assert!(matches!(bb.embed(&DenseArray::zeros(&[8, 8, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig { embedding_dim: 4, ..Default::default() };
        assert!(Backbone::new(bad, 0).is_err());
        let bad = BackboneConfig { input: ImageShape::square(18), ..Default::default() };
        assert!(Backbone::new(bad, 0).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = BackboneConfig {
            input: ImageShape::square(8),
            widths: vec![3, 4],
            kernel: 3,
            embedding_dim: 8,
            activation: Activation::Softplus,
        };
        let bb = Backbone::new(cfg.clone(), 6).unwrap();
        let imgs = [image(1, &cfg.input), image(2, &cfg.input)];
        let x = bb.batch(&[&imgs[0], &imgs[1]]).unwrap();
        let target = DenseArray::from_rows(&[vec![0.0; 8], vec![0.0; 8]])
            .unwrap()
            .map(|_| 1.0 / 8.0);
        let check = finite_difference(bb.params(), 1e-5, |ps| {
            forward_backward(ps, |g, ps| {
                let xi = g.constant(x.clone());
                let e = bb.forward(g, ps, xi, true)?;
                g.softmax_cross_entropy(e, target.clone())
            })
        })
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }
}
