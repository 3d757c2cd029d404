//! Classifier-weight generation: prototypes from support embeddings, appended
//! to the base rows and refined by graph attention over all rows.
//!
//! Rows are transformed on the right, so `V w_i` for every row at once is
//! `W · Vᵀ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Embedding;
use crate::classifier::{normalize_rows, ClassifierWeights};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numeric::{DenseArray, Graph, ParameterSet, Var};

pub const V_A: &str = "gat.v_a";
pub const V_B: &str = "gat.v_b";
pub const V_C: &str = "gat.v_c";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dim: usize,
    /// Attention + update rounds; attention is recomputed every round.
    pub rounds: usize,
    /// `false` skips refinement entirely (W_new = W_I).
    pub use_gat: bool,
    /// Message `Σ_j a_ij V_c w_i` instead of `Σ_j a_ij V_c w_j`.
    pub literal_eq5: bool,
    /// Rescale base rows to unit norm before they enter the graph.
    pub normalize_base: bool,
    /// Half-width of the uniform init of `V_a`, `V_b` as a multiple of `1/√d`.
    pub attention_init: f64,
    /// Half-width of the uniform init of `V_c` as a multiple of `1/√d`.
    pub message_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            rounds: 1,
            use_gat: true,
            literal_eq5: false,
            normalize_base: true,
            attention_init: 0.01,
            message_init: 0.01,
        }
    }
}

/// `W_I = [W_base; W_novel]` with row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAssembly {
    pub weights: DenseArray,
    pub class_ids: Vec<ClassId>,
    pub num_base: usize,
    pub num_novel: usize,
}

/// Normalised mean of the support embeddings.
pub fn class_prototype(support: &[Embedding]) -> Result<DenseArray> {
    let first = support.first().ok_or_else(|| Error::InsufficientData("prototype needs at least one embedding".into()))?;
    let d = first.dim();
    let mut mean = vec![0.0; d];
    for e in support {
        if e.dim() != d {
            return Err(Error::Shape(format!("support embeddings of length {d} and {}", e.dim())));
        }
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    let k = support.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(Error::ZeroEmbedding);
    }
    Ok(DenseArray::vector(mean.into_iter().map(|v| v / norm).collect()))
}

/// Base rows in their original order, then the novel rows in the given order.
pub fn assemble(base: &ClassifierWeights, novel: &[(ClassId, DenseArray)]) -> Result<WeightAssembly> {
    let d = base.dim();
    let mut class_ids = base.class_ids().to_vec();
    let mut parts = vec![base.weights()];
    for (id, row) in novel {
        if row.len() != d {
            return Err(Error::Shape(format!("novel row for class {id} has length {}, base rows have {d}", row.len())));
        }
        class_ids.push(*id);
        parts.push(row);
    }
    Ok(WeightAssembly {
        weights: DenseArray::concat_rows(&parts)?,
        class_ids,
        num_base: base.num_classes(),
        num_novel: novel.len(),
    })
}

fn square(v: &DenseArray, d: usize, name: &str) -> Result<()> {
    if v.shape() != [d, d] {
        return Err(Error::Shape(format!("`{name}` is {:?}, rows have dimension {d}", v.shape())));
    }
    Ok(())
}

/// Row-softmax of `e_ij = ⟨V_a w_i, V_b w_j⟩` over all pairs including `i = j`.
pub fn gat_attention(w: &DenseArray, v_a: &DenseArray, v_b: &DenseArray) -> Result<DenseArray> {
    let mut g = Graph::new();
    let (w, a, b) = (g.constant(w.clone()), g.constant(v_a.clone()), g.constant(v_b.clone()));
    let att = attention(&mut g, w, a, b)?;
    Ok(g.value(att).clone())
}

/// One residual round `w_i + Σ_j a_ij V_c w_j` (or `w_i + V_c w_i` when `literal`).
pub fn gat_update(w: &DenseArray, attention_matrix: &DenseArray, v_c: &DenseArray, literal: bool) -> Result<DenseArray> {
    let mut g = Graph::new();
    let (wv, av, cv) = (g.constant(w.clone()), g.constant(attention_matrix.clone()), g.constant(v_c.clone()));
    let out = update(&mut g, wv, av, cv, literal)?;
    Ok(g.value(out).clone())
}

fn attention(g: &mut Graph, w: Var, v_a: Var, v_b: Var) -> Result<Var> {
    let d = g.value(w).cols();
    square(g.value(v_a), d, V_A)?;
    square(g.value(v_b), d, V_B)?;
    let p = g.matmul_t(w, v_a)?;
    let q = g.matmul_t(w, v_b)?;
    let e = g.matmul_t(p, q)?;
    g.row_softmax(e)
}

fn update(g: &mut Graph, w: Var, a: Var, v_c: Var, literal: bool) -> Result<Var> {
    let d = g.value(w).cols();
    square(g.value(v_c), d, V_C)?;
    let k = g.value(w).rows();
    if g.value(a).shape() != [k, k] {
        return Err(Error::Shape(format!("attention {:?} for {k} rows", g.value(a).shape())));
    }
    let m = g.matmul_t(w, v_c)?;
    let msg = if literal { m } else { g.matmul(a, m)? };
    g.add(w, msg)
}

/// `G_ψ` with its parameters `V_a`, `V_b`, `V_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    config: GeneratorConfig,
    params: ParameterSet,
}

impl WeightGenerator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.rounds == 0 {
            return Err(Error::Config("generator needs positive dim and rounds".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut draw = |c: f64| {
            let bound = c / (d as f64).sqrt();
            let v = (0..d * d).map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }).collect();
            DenseArray::new(vec![d, d], v).expect("square")
        };
        let mut params = ParameterSet::new();
        params.insert(V_A, draw(config.attention_init));
        params.insert(V_B, draw(config.attention_init));
        params.insert(V_C, draw(config.message_init));
        Ok(Self { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: ParameterSet) -> Result<Self> {
        let mut own = ParameterSet::new();
        for name in [V_A, V_B, V_C] {
            let v = params.get(name)?;
            square(v, config.dim, name)?;
            own.insert(name, v.clone());
        }
        Ok(Self { config, params: own })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: GeneratorConfig) -> Result<()> {
        if config.dim != self.config.dim {
            return Err(Error::Config(format!("generator dim is {}, not {}", self.config.dim, config.dim)));
        }
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Refinement of an assembled matrix recorded on `g`; `params` supplies ψ.
    pub fn refine_on(&self, g: &mut Graph, params: &ParameterSet, w: Var, trainable: bool) -> Result<Var> {
        if !self.config.use_gat {
            return Ok(w);
        }
        let fetch = |g: &mut Graph, name: &str| if trainable { g.param(params, name) } else { g.frozen(params, name) };
        let (a, b, c) = (fetch(g, V_A)?, fetch(g, V_B)?, fetch(g, V_C)?);
        let mut cur = w;
        for _ in 0..self.config.rounds {
            let att = attention(g, cur, a, b)?;
            cur = update(g, cur, att, c, self.config.literal_eq5)?;
        }
        Ok(cur)
    }

    pub fn refine(&self, w: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let out = self.refine_on(&mut g, &self.params, wv, false)?;
        Ok(g.value(out).clone())
    }

    /// Base rows as they enter the assembly.
    pub fn prepare_base(&self, base: &ClassifierWeights) -> Result<ClassifierWeights> {
        if !self.config.normalize_base {
            return Ok(base.clone());
        }
        ClassifierWeights::new(base.normalized()?, base.class_ids().to_vec(), base.scale())
    }

    /// Prototypes → assembly → refinement; returns `W_new` over base then novel classes.
    pub fn generate(&self, base: &ClassifierWeights, support: &[(ClassId, Vec<Embedding>)]) -> Result<ClassifierWeights> {
        if support.is_empty() {
            return Err(Error::InsufficientData("generation needs at least one novel class".into()));
        }
        if base.dim() != self.config.dim {
            return Err(Error::Shape(format!("base rows are {}-d, generator is {}-d", base.dim(), self.config.dim)));
        }
        let novel = support
            .iter()
            .map(|(id, embs)| Ok((*id, class_prototype(embs)?)))
            .collect::<Result<Vec<_>>>()?;
        let asm = assemble(&self.prepare_base(base)?, &novel)?;
        let refined = self.refine(&asm.weights)?;
        ClassifierWeights::new(refined, asm.class_ids, base.scale())
    }
}

/// Row-normalised copy with class ids in errors; used by callers that store
/// generated rows for later cosine scoring.
pub fn unit_rows(w: &ClassifierWeights) -> Result<DenseArray> {
    normalize_rows(w.weights(), w.class_ids())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::numeric::{finite_difference, forward_backward};

    fn emb(v: &[f64]) -> Embedding {
        Embedding(DenseArray::vector(v.to_vec()))
    }

    #[test]
    fn prototype_closed_forms() {
        let p = class_prototype(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert_abs_diff_eq!(p.values()[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
        assert_abs_diff_eq!(p.values()[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
        assert_eq!(class_prototype(&[emb(&[3.0, 4.0])]).unwrap().values(), &[0.6, 0.8]);
        let five = vec![emb(&[3.0, 4.0]); 5];
        let p = class_prototype(&five).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.6, epsilon = 1e-15);
        assert!(matches!(class_prototype(&[emb(&[1.0, 0.0]), emb(&[-1.0, 0.0])]), Err(Error::ZeroEmbedding)));
        assert!(class_prototype(&[]).is_err());
    }

    #[test]
    fn assembly_order_and_identity() {
        let base = ClassifierWeights::new(DenseArray::filled(&[10, 4], 0.5), (0..10).map(ClassId).collect(), 10.0).unwrap();
        let novel: Vec<_> = (0..3).map(|i| (ClassId(20 + i), DenseArray::vector(vec![i as f64; 4]))).collect();
        let a = assemble(&base, &novel).unwrap();
        assert_eq!(a.weights.shape(), &[13, 4]);
        assert_eq!((a.num_base, a.num_novel), (10, 3));
        assert_eq!(a.class_ids[10..], [ClassId(20), ClassId(21), ClassId(22)]);
        assert_eq!(a.weights.row(12), &[2.0; 4]);
        assert_eq!(assemble(&base, &[]).unwrap().weights, *base.weights());
        assert!(assemble(&base, &[(ClassId(30), DenseArray::vector(vec![1.0; 3]))]).is_err());
    }

    #[test]
    fn attention_closed_forms() {
        let w = DenseArray::identity(3);
        let zero = DenseArray::zeros(&[3, 3]);
        let a = gat_attention(&w, &zero, &zero).unwrap();
        assert!(a.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let i = DenseArray::identity(3);
        let a = gat_attention(&w, &i, &i).unwrap();
        let e = std::f64::consts::E;
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { e / (e + 2.0) } else { 1.0 / (e + 2.0) };
                assert_abs_diff_eq!(a.get2(r, c), expect, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(a.get2(0, 0), 0.5761, epsilon = 1e-4);
    }

    #[test]
    fn update_closed_forms() {
        let w = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let uniform = DenseArray::filled(&[2, 2], 0.5);
        let out = gat_update(&w, &uniform, &DenseArray::identity(2), false).unwrap();
        assert_eq!(out.row(0), &[1.0 + 2.0, 2.0 + 0.5]);
        assert_eq!(out.row(1), &[3.0 + 2.0, -1.0 + 0.5]);
        let lit = gat_update(&w, &uniform, &DenseArray::identity(2), true).unwrap();
        assert_eq!(lit, w.scaled(2.0));
        assert_eq!(gat_update(&w, &uniform, &DenseArray::zeros(&[2, 2]), false).unwrap(), w);
    }

    #[test]
    fn no_gat_mode_returns_assembly() {
        let cfg = GeneratorConfig { dim: 3, use_gat: false, normalize_base: false, ..Default::default() };
        let gen = WeightGenerator::new(cfg, 0).unwrap();
        let base = ClassifierWeights::new(DenseArray::identity(3).scaled(2.0), (0..3).map(ClassId).collect(), 10.0).unwrap();
        let out = gen.generate(&base, &[(ClassId(7), vec![emb(&[0.0, 3.0, 4.0])])]).unwrap();
        assert_eq!(out.weights().row(3), &[0.0, 0.6, 0.8]);
        assert_eq!(out.weights().row(0), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn message_weights_gradient_matches_differences() {
        let cfg = GeneratorConfig { dim: 4, rounds: 2, attention_init: 1.0, message_init: 1.0, ..Default::default() };
        let gen = WeightGenerator::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DenseArray::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target = DenseArray::new(vec![5, 5], (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let check = finite_difference(gen.params(), 1e-5, |ps| {
            forward_backward(ps, |g, ps| {
                let wv = g.constant(w.clone());
                let out = gen.refine_on(g, ps, wv, true)?;
                let z = g.matmul_t(wv, out)?;
                g.softmax_cross_entropy(z, target.clone())
            })
        })
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }
}
