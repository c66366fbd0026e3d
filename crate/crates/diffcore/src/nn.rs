//! Composite layers built from the primitive graph ops.
//!
//! Each composite is a sequence of primitives, so their gradients (and
//! gradients of those gradients) come for free from the primitive rules.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sum of every element, as a 1-element tensor.
pub fn sum_all<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).numel();
    let flat = g.reshape(x, &[n])?;
    g.sum_axis(flat, 0)
}

pub fn mean_all<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).numel();
    let s = sum_all(g, x)?;
    g.scale(s, 1.0 / n as f64)
}

/// `x (n×f) + bias (f)` broadcast over rows.
pub fn add_row<T: Real>(g: &mut Graph<T>, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let (n, f) = (g.shape(x)[0], g.value(bias).numel());
    let b = g.reshape(bias, &[1, f])?;
    let b = g.expand(b, 0, n)?;
    g.add(x, b)
}

/// `x (n×f) ⊙ scale (f)` broadcast over rows.
pub fn mul_row<T: Real>(g: &mut Graph<T>, x: NodeId, scale: NodeId) -> Result<NodeId> {
    let (n, f) = (g.shape(x)[0], g.value(scale).numel());
    let s = g.reshape(scale, &[1, f])?;
    let s = g.expand(s, 0, n)?;
    g.mul(x, s)
}

/// `x · w + b`.
pub fn linear<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => add_row(g, y, b),
        None => Ok(y),
    }
}

/// How a batch-norm layer obtains its normalization statistics.
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Biased mean/variance of the current batch (training semantics).
    Batch,
    /// Fixed statistics, e.g. running estimates at inference.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Statistics observed on a batch, for updating running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-feature batch normalization of an `n×f` matrix.
pub fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    stats: BnStats<'_>,
    eps: f64,
) -> Result<(NodeId, Option<BatchMoments>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(DiffError::InvalidShape(format!(
            "batch_norm expects n×f, got {shape:?}"
        )));
    }
    let x3 = g.reshape(x, &[shape[0], shape[1], 1])?;
    let (y, m) = normalize(g, x3, gamma, beta, stats, eps)?;
    Ok((g.reshape(y, &shape)?, m))
}

/// Per-channel batch normalization of an `n×c×h×w` tensor.
pub fn batch_norm2d<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    stats: BnStats<'_>,
    eps: f64,
) -> Result<(NodeId, Option<BatchMoments>)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(DiffError::InvalidShape(format!(
            "batch_norm2d expects n×c×h×w, got {s:?}"
        )));
    }
    let x3 = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let (y, m) = normalize(g, x3, gamma, beta, stats, eps)?;
    Ok((g.reshape(y, &s)?, m))
}

/// Broadcasts a `1×f×1` node to `n×f×r`.
fn spread<T: Real>(g: &mut Graph<T>, v: NodeId, n: usize, r: usize) -> Result<NodeId> {
    let v = g.expand(v, 0, n)?;
    if r == 1 {
        Ok(v)
    } else {
        g.expand(v, 2, r)
    }
}

/// Normalizes `x (n×f×r)` per feature `f`, pooling axes 0 and 2.
fn normalize<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    stats: BnStats<'_>,
    eps: f64,
) -> Result<(NodeId, Option<BatchMoments>)> {
    let s = g.shape(x).to_vec();
    let (n, f, r) = (s[0], s[1], s[2]);
    if g.value(gamma).numel() != f || g.value(beta).numel() != f {
        return Err(DiffError::InvalidShape(format!(
            "batch-norm affine parameters {:?} / {:?} for {f} features",
            g.shape(gamma),
            g.shape(beta)
        )));
    }
    let gamma = g.reshape(gamma, &[1, f, 1])?;
    let beta = g.reshape(beta, &[1, f, 1])?;
    let pooled = (n * r) as f64;
    match stats {
        BnStats::Batch => {
            let total = if r == 1 { x } else { g.sum_axis(x, 2)? };
            let total = g.sum_axis(total, 0)?;
            let mean = g.scale(total, 1.0 / pooled)?;
            let mean_b = spread(g, mean, n, r)?;
            let centered = g.sub(x, mean_b)?;
            let sq = g.mul(centered, centered)?;
            let ss = if r == 1 { sq } else { g.sum_axis(sq, 2)? };
            let ss = g.sum_axis(ss, 0)?;
            let var = g.scale(ss, 1.0 / pooled)?;
            let moments = BatchMoments {
                mean: g.value(mean).to_f64(),
                var: g.value(var).to_f64(),
            };
            let shifted = g.add_scalar(var, eps)?;
            let inv = g.powf(shifted, -0.5)?;
            let a = g.mul(inv, gamma)?;
            let a = spread(g, a, n, r)?;
            let scaled = g.mul(centered, a)?;
            let b = spread(g, beta, n, r)?;
            Ok((g.add(scaled, b)?, Some(moments)))
        }
        BnStats::Fixed { mean, var } => {
            if mean.len() != f || var.len() != f {
                return Err(DiffError::InvalidShape(format!(
                    "batch_norm statistics have {} / {} entries for {f} features",
                    mean.len(),
                    var.len()
                )));
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let inv = g.constant(Tensor::from_f64(&[1, f, 1], &inv)?);
            let m = g.constant(Tensor::from_f64(&[1, f, 1], mean)?);
            // y = x·a + (beta - mean·a) with a = gamma / sqrt(var + eps)
            let a = g.mul(gamma, inv)?;
            let ma = g.mul(m, a)?;
            let shift = g.sub(beta, ma)?;
            let a = spread(g, a, n, r)?;
            let scaled = g.mul(x, a)?;
            let shift = spread(g, shift, n, r)?;
            Ok((g.add(scaled, shift)?, None))
        }
    }
}

/// Stride-1 2-D convolution (cross-correlation) of `x (n×c×h×w)` with
/// `w (o×c×kh×kw)`, zero padding `(ph, pw)`.
pub fn conv2d<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    w: NodeId,
    bias: Option<NodeId>,
    padding: (usize, usize),
) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(DiffError::InvalidShape(format!(
            "conv2d input {xs:?} incompatible with kernel {ws:?}"
        )));
    }
    let y = g.conv(x, w, padding)?;
    match bias {
        Some(b) => {
            let o = ws[0];
            let b4 = g.reshape(b, &[1, o, 1, 1])?;
            let b4 = g.expand(b4, 2, xs[2] + 2 * padding.0 + 1 - ws[2])?;
            let b4 = g.expand(b4, 3, xs[3] + 2 * padding.1 + 1 - ws[3])?;
            let b4 = g.expand(b4, 0, xs[0])?;
            g.add(y, b4)
        }
        None => Ok(y),
    }
}

/// Result of [`smooth_cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: NodeId,
    /// True when some probability with nonzero target weight was clamped.
    pub clamped: bool,
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy of `probs (n×c)` against `(1-ε)·onehot + ε/c` targets.
pub fn smooth_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    probs: NodeId,
    labels: &[usize],
    epsilon: f64,
) -> Result<LossOutput> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
        return Err(DiffError::InvalidShape(format!(
            "probabilities {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, c) = (s[0], s[1]);
    let mut target = vec![epsilon / c as f64; n * c];
    for (i, &l) in labels.iter().enumerate() {
        target[i * c + l] += 1.0 - epsilon;
    }
    let clamped = {
        let p = g.value(probs).to_f64();
        p.iter()
            .zip(&target)
            .any(|(&p, &t)| t > 0.0 && p < PROB_FLOOR)
    };
    let t = g.constant(Tensor::from_f64(&[n, c], &target)?);
    let p = g.clamp_min(probs, PROB_FLOOR)?;
    let lp = g.log(p)?;
    let weighted = g.mul(lp, t)?;
    let total = sum_all(g, weighted)?;
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok(LossOutput { loss, clamped })
}
