//! Dense arrays, parameter sets and reverse-mode gradients.

mod array;
mod graph;
mod params;

pub use array::DenseArray;
pub use graph::{Activation, Graph, Var};
pub(crate) use graph::softmax_in_place;
pub use params::{check_compatible, GradTag, GradientSet, ParameterSet};

use crate::error::{Error, Result};

/// Records the computation built by `build`, differentiates the scalar it returns,
/// and reports a gradient for every parameter in `params` (zero where unused).
pub fn forward_backward<F>(params: &ParameterSet, build: F) -> Result<(f64, GradientSet)>
where
    F: FnOnce(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, params)?;
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = graph.backward(loss)?;
    for (name, p) in params.iter() {
        if grads.get(name).is_none() {
            grads.insert(name.clone(), DenseArray::zeros(p.shape()));
        }
    }
    Ok((value, grads))
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Central-difference gradient oracle.
///
/// For every scalar of every parameter, compares the analytic gradient from
/// `loss_and_grad` against `(L(p+eps) − L(p−eps)) / 2eps` and returns the max of
/// `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn finite_difference<F>(params: &ParameterSet, eps: f64, loss_and_grad: F) -> Result<GradCheck>
where
    F: Fn(&ParameterSet) -> Result<(f64, GradientSet)>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let (first, analytic) = loss_and_grad(params)?;
    let (second, _) = loss_and_grad(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut probe = params.clone();
    let mut report = GradCheck { max_relative_error: 0.0, worst: None, checked: 0 };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = analytic.get(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?.clone();
        for i in 0..grad.len() {
            let orig = probe.get(&name)?.values()[i];
            probe.get_mut(&name)?.values_mut()[i] = orig + eps;
            let (plus, _) = loss_and_grad(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig - eps;
            let (minus, _) = loss_and_grad(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.values()[i] - numeric).abs() / (numeric.abs() + 1e-12);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
