//! Differentiating through gradient-descent parameter updates.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;

/// One inner-loop substitution `param ↦ updated`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InnerUpdate {
    pub param: NodeId,
    pub updated: NodeId,
}

/// Records `θ - α·∇θ loss` for each of `params`.
///
/// With `first_order` the inner gradient is detached, so later
/// differentiation ignores its dependence on `θ`.
pub fn sgd_step<T: Real>(
    g: &mut Graph<T>,
    loss: NodeId,
    params: &[NodeId],
    alpha: f64,
    first_order: bool,
) -> Result<Vec<NodeId>> {
    let grads = g.grad(loss, params)?;
    params
        .iter()
        .zip(grads)
        .map(|(&p, d)| {
            let d = if first_order { g.detach(d)? } else { d };
            let step = g.scale(d, alpha)?;
            g.sub(p, step)
        })
        .collect()
}

/// Whether `node` is computed (transitively, through differentiable edges or not)
/// from `ancestor`.
pub fn depends_on<T: Real>(g: &Graph<T>, node: NodeId, ancestor: NodeId) -> bool {
    if node == ancestor {
        return true;
    }
    if node.index() < ancestor.index() {
        return false;
    }
    let mut seen = vec![false; node.index() + 1];
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if n == ancestor {
            return true;
        }
        if seen[n.index()] {
            continue;
        }
        seen[n.index()] = true;
        for i in g.inputs_of(n) {
            if i.index() >= ancestor.index() && !seen[i.index()] {
                stack.push(i);
            }
        }
    }
    false
}

/// Gradient of `loss_outer` with respect to `wrt`, including every term
/// that flows through the recorded inner `updates` (second-order MAML).
///
/// Each update must have been built on this graph from its parameter,
/// e.g. by [`sgd_step`]; otherwise the dependence on the pre-update
/// parameters would silently vanish.
pub fn grad_through_update<T: Real>(
    g: &mut Graph<T>,
    loss_outer: NodeId,
    updates: &[InnerUpdate],
    wrt: &[NodeId],
) -> Result<Vec<NodeId>> {
    for u in updates {
        g.check(u.param)?;
        g.check(u.updated)?;
        if u.updated != u.param && (g.is_leaf(u.updated) || !depends_on(g, u.updated, u.param)) {
            return Err(DiffError::UnrecordedUpdate {
                name: format!("node {}", u.param.index()),
            });
        }
    }
    g.grad(loss_outer, wrt)
}
