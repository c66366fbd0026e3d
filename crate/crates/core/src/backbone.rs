//! View encoders: the dynamic GCN over channels and the three-block CNN over
//! the spatial grid, plus the softmax classifier.

use face_diffcore::nn::{conv2d, linear};
use face_diffcore::{Graph, NodeId, ParamNodes, Real};
use serde::{Deserialize, Serialize};

use crate::data::RESIZED;
use crate::error::{FaceError, Result};
use crate::norm::BnContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::Relu => g.relu(x)?,
            Activation::Sigmoid => g.sigmoid(x)?,
        })
    }
}

/// Axis layout of the batch-norm layers inside the graph branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcnNorm {
    /// One statistic per (channel, band) feature.
    PerFeature,
    /// One statistic per band, pooled over channels.
    PerBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgcnConfig {
    pub channels: usize,
    pub bands: usize,
    /// Width of the `1×K` band-axis kernels.
    pub kernel: usize,
    /// Reduction ratio of the adjacency projections.
    pub reduction: usize,
    pub sigma1: Activation,
    pub sigma2: Activation,
    pub norm: GcnNorm,
}

impl DgcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.bands == 0 {
            return Err(FaceError::Config("graph branch needs channels and bands".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(FaceError::Config(format!(
                "band kernel width must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(FaceError::Config(format!(
                "{} channels not divisible by reduction ratio {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.channels * self.bands
    }

    /// Width of one batch-norm layer in this branch.
    pub fn norm_width(&self) -> usize {
        match self.norm {
            GcnNorm::PerFeature => self.features(),
            GcnNorm::PerBand => self.bands,
        }
    }
}

/// `A_d = σ1(W2 · σ2(W1 · A0))`, with `W1: (C/r)×C` and `W2: C×(C/r)`.
pub fn dynamic_adjacency<T: Real>(
    g: &mut Graph<T>,
    a0: NodeId,
    w1: NodeId,
    w2: NodeId,
    sigma1: Activation,
    sigma2: Activation,
) -> Result<NodeId> {
    let inner = g.matmul(w1, a0)?;
    let inner = sigma2.apply(g, inner)?;
    let outer = g.matmul(w2, inner)?;
    sigma1.apply(g, outer)
}

/// Row-normalized adjacency `D⁻¹A`.
pub fn laplacian<T: Real>(g: &mut Graph<T>, a: NodeId) -> Result<NodeId> {
    let c = g.shape(a)[1];
    let deg = g.sum_axis(a, 1)?;
    if let Some(row) = g.value(deg).data().iter().position(|&d| d == T::zero()) {
        return Err(FaceError::SingularDegree { row });
    }
    let inv = g.powf(deg, -1.0)?;
    let inv = g.expand(inv, 1, c)?;
    Ok(g.mul(a, inv)?)
}

/// Intermediate nodes of the graph branch, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DgcnNodes {
    pub adjacency: NodeId,
    pub laplacian: NodeId,
    /// `H`, `n×C×B`.
    pub h: NodeId,
    /// `L·H + X` before the output normalization, `n×C×B`.
    pub aggregate: NodeId,
    /// `Z_g`, flattened to `n×(C·B)`.
    pub z: NodeId,
}

fn band_conv<T: Real>(g: &mut Graph<T>, x: NodeId, kernel: NodeId, cfg: &DgcnConfig) -> Result<NodeId> {
    let n = g.shape(x)[0];
    let x4 = g.reshape(x, &[n, 1, cfg.channels, cfg.bands])?;
    let k = g.reshape(kernel, &[1, 1, 1, cfg.kernel])?;
    let y = conv2d(g, x4, k, None, (0, cfg.kernel / 2))?;
    Ok(g.reshape(y, &[n, cfg.channels, cfg.bands])?)
}

fn gcn_norm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    bn: &mut BnContext<'_>,
    name: &str,
    x: NodeId,
    cfg: &DgcnConfig,
) -> Result<NodeId> {
    let n = g.shape(x)[0];
    let rows = match cfg.norm {
        GcnNorm::PerFeature => g.reshape(x, &[n, cfg.features()])?,
        GcnNorm::PerBand => g.reshape(x, &[n * cfg.channels, cfg.bands])?,
    };
    let y = bn.norm(g, p, name, rows)?;
    Ok(g.reshape(y, &[n, cfg.channels, cfg.bands])?)
}

/// Graph branch on an `n×C×B` batch, with all intermediates.
pub fn dgcn_encode_parts<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    bn: &mut BnContext<'_>,
    x: NodeId,
    cfg: &DgcnConfig,
) -> Result<DgcnNodes> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != cfg.channels || s[2] != cfg.bands {
        return Err(FaceError::Precondition(format!(
            "graph branch expects n×{}×{}, got {s:?}",
            cfg.channels, cfg.bands
        )));
    }
    let n = s[0];
    let adjacency = dynamic_adjacency(
        g,
        p.get("gcn.a0")?,
        p.get("gcn.w1")?,
        p.get("gcn.w2")?,
        cfg.sigma1,
        cfg.sigma2,
    )?;
    let lap = laplacian(g, adjacency)?;

    let h = band_conv(g, x, p.get("gcn.theta1")?, cfg)?;
    let h = gcn_norm(g, p, bn, "gcn.bn1", h, cfg)?;
    let h = g.relu(h)?;
    let h = band_conv(g, h, p.get("gcn.theta2")?, cfg)?;
    let h = gcn_norm(g, p, bn, "gcn.bn2", h, cfg)?;

    // L·H_i for every sample at once: channels lead, (sample, band) trail.
    let cols = g.permute(h, &[1, 0, 2])?;
    let cols = g.reshape(cols, &[cfg.channels, n * cfg.bands])?;
    let lh = g.matmul(lap, cols)?;
    let lh = g.reshape(lh, &[cfg.channels, n, cfg.bands])?;
    let lh = g.permute(lh, &[1, 0, 2])?;
    let aggregate = g.add(lh, x)?;
    let z = gcn_norm(g, p, bn, "gcn.bn3", aggregate, cfg)?;
    let z = g.reshape(z, &[n, cfg.features()])?;
    Ok(DgcnNodes {
        adjacency,
        laplacian: lap,
        h,
        aggregate,
        z,
    })
}

/// `Z_g` for an `n×C×B` batch, as `n×(C·B)`.
pub fn dgcn_encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    bn: &mut BnContext<'_>,
    x: NodeId,
    cfg: &DgcnConfig,
) -> Result<NodeId> {
    Ok(dgcn_encode_parts(g, p, bn, x, cfg)?.z)
}

/// Flattened width of the spatial encoder output.
pub fn conv3_width(filters: usize) -> usize {
    let side = RESIZED / 4;
    side * side * filters
}

/// Three conv-BN-ReLU blocks on `n×B×32×32`, pooling after the first two,
/// flattened channel-major to `n×(8·8·filters)`.
pub fn conv3_encode<T: Real>(g: &mut Graph<T>, p: &ParamNodes, bn: &mut BnContext<'_>, s: NodeId) -> Result<NodeId> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 4 || shape[2] != RESIZED || shape[3] != RESIZED {
        return Err(FaceError::Precondition(format!(
            "spatial encoder expects n×B×{RESIZED}×{RESIZED}, got {shape:?}"
        )));
    }
    let mut h = s;
    for block in 1..=3 {
        let w = p.get(&format!("cnn.conv{block}.w"))?;
        let b = p.get(&format!("cnn.conv{block}.b"))?;
        h = conv2d(g, h, w, Some(b), (1, 1))?;
        h = bn.norm2d(g, p, &format!("cnn.bn{block}"), h)?;
        h = g.relu(h)?;
        if block < 3 {
            h = g.max_pool2(h)?;
        }
    }
    let o = g.shape(h).to_vec();
    Ok(g.reshape(h, &[o[0], o[1] * o[2] * o[3]])?)
}

/// `softmax(z·W + b)`.
pub fn classify<T: Real>(g: &mut Graph<T>, z: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let logits = linear(g, z, w, Some(b))?;
    Ok(g.softmax(logits)?)
}
