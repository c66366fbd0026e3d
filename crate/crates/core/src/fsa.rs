//! Few-shot adapter and prediction head.

use face_diffcore::nn::linear;
use face_diffcore::{Graph, NodeId, ParamNodes, Real};

use crate::backbone::classify;
use crate::error::Result;
use crate::norm::BnContext;

/// `relu(BN₂(relu(BN₁(z·W_down + b_down))·W_up + b_up)) + z`.
///
/// Parameters are `adapter.{down,up}.{w,b}` and batch-norm layers
/// `adapter.bn1` (bottleneck width) and `adapter.bn2` (feature width).
pub fn adapt<T: Real>(g: &mut Graph<T>, p: &ParamNodes, bn: &mut BnContext<'_>, z: NodeId) -> Result<NodeId> {
    let h = linear(g, z, p.get("adapter.down.w")?, Some(p.get("adapter.down.b")?))?;
    let h = bn.norm(g, p, "adapter.bn1", h)?;
    let h = g.relu(h)?;
    let h = linear(g, h, p.get("adapter.up.w")?, Some(p.get("adapter.up.b")?))?;
    let h = bn.norm(g, p, "adapter.bn2", h)?;
    let h = g.relu(h)?;
    Ok(g.add(h, z)?)
}

/// Class probabilities from the `head.{w,b}` layer.
pub fn predict<T: Real>(g: &mut Graph<T>, p: &ParamNodes, z: NodeId) -> Result<NodeId> {
    classify(g, z, p.get("head.w")?, p.get("head.b")?)
}
