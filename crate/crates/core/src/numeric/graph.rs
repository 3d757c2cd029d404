//! Tape-based reverse-mode differentiation over coarse tensor ops.
//!
//! Each op is a whole-array kernel (conv, matmul, row normalisation, softmax
//! cross-entropy, ...) with a hand-written vector-Jacobian product, so the
//! tape stays short even for convolutional backbones.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DenseArray, GradTag, GradientSet, ParameterSet};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Act(Var, Activation),
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    RowSoftmax(Var),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SoftmaxXent { logits: Var, targets: DenseArray },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseArray,
    /// Op-specific forward cache (row norms, softmax probabilities).
    aux: Vec<f64>,
    requires_grad: bool,
    label: Option<String>,
}

/// A recorded computation. Build it forward, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    by_name: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: DenseArray, aux: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, aux, requires_grad, label: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn describe(&self, v: Var) -> String {
        match &self.nodes[v.0].label {
            Some(l) => format!("`{l}` {:?}", self.nodes[v.0].value.shape()),
            None => format!("node#{} {:?}", v.0, self.nodes[v.0].value.shape()),
        }
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(Op::Leaf, value, Vec::new(), false)
    }

    /// Registers a differentiable leaf under `key`. Repeated keys return the same node.
    pub fn leaf(&mut self, key: &str, value: &DenseArray) -> Var {
        if let Some(&v) = self.by_name.get(key) {
            return v;
        }
        let v = self.push(Op::Leaf, value.clone(), Vec::new(), true);
        self.nodes[v.0].label = Some(key.to_string());
        self.params.insert(key.to_string(), v);
        self.by_name.insert(key.to_string(), v);
        v
    }

    /// Differentiable leaf taken from a parameter set.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let value = set.get(name)?;
        Ok(self.leaf(name, value))
    }

    /// Non-differentiable leaf taken from a parameter set (frozen weights).
    pub fn frozen(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let value = set.get(name)?.clone();
        let v = self.constant(value);
        self.nodes[v.0].label = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| Error::Shape(format!("matmul {} by {}", self.describe(a), self.describe(b))))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, Vec::new(), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b)).map_err(|_| {
            Error::Shape(format!("matmul_t {} by transposed {}", self.describe(a), self.describe(b)))
        })?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulT(a, b), out, Vec::new(), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {} and {}", self.describe(a), self.describe(b))));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, Vec::new(), rg))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.cols();
        if vx.shape().len() != 2 || vb.len() != n {
            return Err(Error::Shape(format!("bias {} for {}", self.describe(b), self.describe(x))));
        }
        let mut out = vx.clone();
        for row in out.values_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(vb.values()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddRowBias(x, b), out, Vec::new(), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), out, Vec::new(), rg)
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("mul_scalar by non-scalar {}", self.describe(s))));
        }
        let c = self.value(s).values()[0];
        let out = self.value(x).scaled(c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::MulScalar(x, s), out, Vec::new(), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(x);
        self.push(Op::Act(x, act), out, Vec::new(), rg)
    }

    /// Same-padded, stride-1 convolution. `x`: N×C×H×W, `w`: O×C×K×K (K odd), `b`: O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 || vb.len() != ws[0]
        {
            return Err(Error::Shape(format!(
                "conv2d input {} weight {} bias {}",
                self.describe(x),
                self.describe(w),
                self.describe(b)
            )));
        }
        let dims = ConvDims { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], k: ws[2] };
        let mut out = vec![0.0; dims.n * dims.o * dims.h * dims.w];
        conv_forward(&dims, vx.values(), vw.values(), vb.values(), &mut out);
        let out = DenseArray::new(vec![dims.n, dims.o, dims.h, dims.w], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Conv2d { x, w, b }, out, Vec::new(), rg))
    }

    /// 2×2 average pooling with stride 2 over N×C×H×W (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Shape(format!("avg_pool2 needs even spatial dims, got {}", self.describe(x))));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let src = vx.values();
        for plane in 0..n * c {
            let ip = &src[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    op[y * ow + xx] = 0.25 * (ip[i] + ip[i + 1] + ip[i + w] + ip[i + w + 1]);
                }
            }
        }
        let out = DenseArray::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::AvgPool2(x), out, Vec::new(), rg))
    }

    /// Global average pooling N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs 4-d input, got {}", self.describe(x))));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out: Vec<f64> =
            vx.values().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = DenseArray::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GlobalAvgPool(x), out, Vec::new(), rg))
    }

    /// Scales every row to unit l2 norm. Rows with norm ≤ 1e-12 are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let norm = vx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::ZeroRow(format!("row {i} of {}", self.describe(x))));
            }
            norms.push(norm);
            for v in &mut out.values_mut()[i * n..(i + 1) * n] {
                *v /= norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::NormalizeRows(x), out, norms, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&DenseArray> = parts.iter().map(|&p| self.value(p)).collect();
        let out = DenseArray::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, Vec::new(), rg))
    }

    /// Softmax over each row, stabilised by subtracting the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_finite() {
            return Err(Error::NonFinite(format!("softmax input {}", self.describe(x))));
        }
        let n = vx.cols();
        let mut out = vx.clone();
        for row in out.values_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::RowSoftmax(x), out, Vec::new(), rg))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!("column {bad} out of range for {}", self.describe(x))));
        }
        let mut out = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            let row = vx.row(i);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        let out = DenseArray::new(vec![m, cols.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SelectCols(x, cols.to_vec()), out, Vec::new(), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(rows)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SelectRows(x, rows.to_vec()), out, Vec::new(), rg))
    }

    /// Mean over rows of `−Σ_j t_ij · log softmax(z_i)_j`; targets may be soft.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: DenseArray) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape() != targets.shape() || vz.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "cross-entropy logits {} vs targets {:?}",
                self.describe(logits),
                targets.shape()
            )));
        }
        if !vz.is_finite() {
            return Err(Error::NonFinite(format!("logits {}", self.describe(logits))));
        }
        let (m, n) = (vz.rows(), vz.cols());
        let mut probs = vz.values().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let z = vz.row(i);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, t) in targets.row(i).iter().enumerate() {
                if *t != 0.0 {
                    loss -= t * (z[j] - lse);
                }
            }
            softmax_in_place(row);
        }
        let out = DenseArray::scalar(loss / m as f64);
        let rg = self.rg(logits);
        Ok(self.push(Op::SoftmaxXent { logits, targets }, out, probs, rg))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every registered leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {}", self.describe(loss))));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = GradientSet::new(GradTag::Plain);
        for (name, v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| DenseArray::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let mut acc = |v: Var, d: DenseArray| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul_t(vb)?);
                }
                if self.rg(*b) {
                    acc(*b, va.transpose().matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(vb)?);
                }
                if self.rg(*b) {
                    acc(*b, g.transpose().matmul(va)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.values().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, DenseArray::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::Scale(x, c) => acc(*x, g.scaled(*c)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).values()[0];
                if self.rg(*s) {
                    let ds = g.dot(self.value(*x));
                    acc(*s, DenseArray::new(self.value(*s).shape().to_vec(), vec![ds])?);
                }
                acc(*x, g.scaled(c));
            }
            Op::Act(x, act) => {
                let vx = self.value(*x);
                let mut d = g.clone();
                for ((dv, xv), yv) in d.values_mut().iter_mut().zip(vx.values()).zip(node.value.values()) {
                    *dv *= act.derivative(*xv, *yv);
                }
                acc(*x, d);
            }
            Op::Conv2d { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (xs, ws) = (vx.shape(), vw.shape());
                let dims = ConvDims { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], k: ws[2] };
                let mut dx = if self.rg(*x) { Some(vec![0.0; vx.len()]) } else { None };
                let mut dw = if self.rg(*w) { Some(vec![0.0; vw.len()]) } else { None };
                conv_backward(&dims, vx.values(), vw.values(), g.values(), dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, DenseArray::new(xs.to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    acc(*w, DenseArray::new(ws.to_vec(), dw)?);
                }
                if self.rg(*b) {
                    let hw = dims.h * dims.w;
                    let mut db = vec![0.0; dims.o];
                    for (plane, chunk) in g.values().chunks(hw).enumerate() {
                        db[plane % dims.o] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, DenseArray::new(vec![dims.o], db)?);
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; s.iter().product()];
                for (plane, gp) in g.values().chunks(oh * ow).enumerate() {
                    let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * gp[y * ow + xx];
                            let i = 2 * y * w + 2 * xx;
                            dp[i] += v;
                            dp[i + 1] += v;
                            dp[i + w] += v;
                            dp[i + w + 1] += v;
                        }
                    }
                }
                acc(*x, DenseArray::new(s, dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for &gv in g.values() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(*x, DenseArray::new(s, dx)?);
            }
            Op::NormalizeRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g.clone();
                for (i, norm) in node.aux.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx.values_mut()[i * n + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let len: usize = shape.iter().product();
                    let slice = g.values()[offset..offset + len].to_vec();
                    offset += len;
                    debug_assert_eq!(len % n, 0);
                    acc(*p, DenseArray::new(shape, slice)?);
                }
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g.clone();
                for (i, row) in dx.values_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(i);
                    let dot: f64 = yr.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (j, d) in row.iter_mut().enumerate() {
                        *d = yr[j] * (*d - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SelectCols(x, cols) => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut dx = DenseArray::zeros(vx.shape());
                for i in 0..vx.rows() {
                    for (k, &c) in cols.iter().enumerate() {
                        dx.values_mut()[i * n + c] += g.get2(i, k);
                    }
                }
                acc(*x, dx);
            }
            Op::SelectRows(x, rows) => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut dx = DenseArray::zeros(vx.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx.values_mut()[r * n + j] += g.get2(k, j);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxXent { logits, targets } => {
                let gscale = g.values()[0];
                let vz = self.value(*logits);
                let (m, n) = (vz.rows(), vz.cols());
                let mut dz = vec![0.0; m * n];
                for i in 0..m {
                    let t = targets.row(i);
                    let tsum: f64 = t.iter().sum();
                    for j in 0..n {
                        dz[i * n + j] = gscale * (node.aux[i * n + j] * tsum - t[j]) / m as f64;
                    }
                }
                acc(*logits, DenseArray::new(vz.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

/// Valid output range along one axis for kernel offset `d` (input index = out + d).
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(d: &ConvDims, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (hw, kk, pad) = (d.h * d.w, d.k * d.k, (d.k / 2) as isize);
    for n in 0..d.n {
        for o in 0..d.o {
            let op = &mut out[(n * d.o + o) * hw..(n * d.o + o + 1) * hw];
            op.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..d.c {
                let ip = &x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
                let wk = &w[(o * d.c + c) * kk..(o * d.c + c + 1) * kk];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(d.h, dy);
                    for kx in 0..d.k {
                        let wv = wk[ky * d.k + kx];
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(d.w, dx);
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut op[y * d.w + x0..y * d.w + x1];
                            let ix0 = (x0 as isize + dx) as usize;
                            let irow = &ip[iy * d.w + ix0..iy * d.w + ix0 + (x1 - x0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (hw, kk, pad) = (d.h * d.w, d.k * d.k, (d.k / 2) as isize);
    for n in 0..d.n {
        for o in 0..d.o {
            let gp = &g[(n * d.o + o) * hw..(n * d.o + o + 1) * hw];
            for c in 0..d.c {
                let base = (n * d.c + c) * hw;
                let wbase = (o * d.c + c) * kk;
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(d.h, dy);
                    for kx in 0..d.k {
                        let dxo = kx as isize - pad;
                        let (x0, x1) = span(d.w, dxo);
                        let wv = w[wbase + ky * d.k + kx];
                        let mut wacc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dxo) as usize;
                            let grow = &gp[y * d.w + x0..y * d.w + x1];
                            let start = base + iy * d.w + ix0;
                            if dw.is_some() {
                                let irow = &x[start..start + (x1 - x0)];
                                wacc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let drow = &mut dx[start..start + (x1 - x0)];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wbase + ky * d.k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive_loop() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let b = vec![0.5, -0.25, 0.0];
        let mut g = Graph::new();
        let xv = g.constant(DenseArray::new(vec![2, 2, 4, 4], x.clone()).unwrap());
        let wv = g.constant(DenseArray::new(vec![3, 2, 3, 3], w.clone()).unwrap());
        let bv = g.constant(DenseArray::vector(b.clone()));
        let y = g.conv2d(xv, wv, bv).unwrap();
        let got = g.value(y).values();
        for n in 0..2 {
            for o in 0..3 {
                for yy in 0..4i64 {
                    for xx in 0..4i64 {
                        let mut s = b[o];
                        for c in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (iy, ix) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                        s += w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[((n * 2 + c) * 4 + iy as usize) * 4 + ix as usize];
                                    }
                                }
                            }
                        }
                        let idx = ((n * 3 + o) * 4 + yy as usize) * 4 + xx as usize;
                        assert!((got[idx] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_parameters() {
        let mut p = ParameterSet::new();
        p.insert("fc.weight", DenseArray::zeros(&[3, 2]));
        let mut g = Graph::new();
        let w = g.param(&p, "fc.weight").unwrap();
        let x = g.constant(DenseArray::zeros(&[4, 4]));
        let err = g.matmul(x, w).unwrap_err().to_string();
        assert!(err.contains("fc.weight"), "{err}");
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let p = ParameterSet::new();
        let mut g = Graph::new();
        assert!(matches!(g.param(&p, "missing"), Err(Error::UnknownParameter(_))));
    }
}
