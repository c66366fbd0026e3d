//! Central finite differences over a replayable graph.
//!
//! This is the independent oracle for the reverse-mode rules: it only ever
//! re-runs the forward pass with perturbed leaves.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Central-difference gradient of scalar `output` with respect to the named
/// leaf `name`, perturbing each entry by `±h`.
pub fn central_gradient(
    g: &mut Graph<f64>,
    output: NodeId,
    name: &str,
    h: f64,
) -> Result<Tensor<f64>> {
    let id = g
        .named(name)
        .ok_or_else(|| crate::DiffError::UnknownParameter(name.to_string()))?;
    let base = g.value(id).clone();
    let mut grad = vec![0.0; base.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let fp = g.forward(&[(name, plus)], output)?.item();
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let fm = g.forward(&[(name, minus)], output)?.item();
        *slot = (fp - fm) / (2.0 * h);
    }
    g.forward(&[(name, base.clone())], output)?;
    Tensor::new(base.shape().to_vec(), grad)
}

/// Central-difference derivative of an arbitrary scalar function of a
/// parameter vector.
pub fn central_gradient_fn(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Relative agreement test used by the gradient checks:
/// `|a - b| <= rel · max(|a|, |b|) + abs_floor`.
pub fn close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs_floor
}
