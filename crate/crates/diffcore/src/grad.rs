//! Reverse-mode differentiation that records its own work on the graph.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes, so they can appear in
    /// further computation and be differentiated again. A node in `wrt` that
    /// `output` does not depend on gets a zero tensor.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.value(output).numel() != 1 {
            return Err(DiffError::NonScalarOutput {
                node: output.0,
                shape: self.shape(output).to_vec(),
            });
        }

        // Nodes on some path from a `wrt` node; only these need adjoints.
        let top = output.0;
        let mut tracked = vec![false; top + 1];
        for &w in wrt {
            if w.0 <= top {
                tracked[w.0] = true;
            }
        }
        for i in 0..=top {
            if tracked[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            tracked[i] = match op {
                Op::Leaf | Op::StepMask(..) | Op::Detach(_) => false,
                Op::PoolGather { x, .. } | Op::PoolScatter { x, .. } => tracked[x.0],
                _ => op.inputs().iter().any(|j| tracked[j.0]),
            };
        }

        let mut adj: HashMap<usize, NodeId> = HashMap::new();
        if tracked[top] {
            let seed = self.constant(Tensor::full(self.shape(output), T::one()));
            adj.insert(top, seed);
        }
        for i in (0..=top).rev() {
            if !tracked[i] {
                continue;
            }
            let Some(&g) = adj.get(&i) else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(&op, NodeId(i), g, &tracked)? {
                let total = match adj.get(&input.0) {
                    Some(&prev) => self.add(prev, contrib)?,
                    None => contrib,
                };
                adj.insert(input.0, total);
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(&w.0) {
                Some(&g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(w)))),
            })
            .collect()
    }

    /// Vector-Jacobian products of `op` (producing `out`) for upstream `g`,
    /// one entry per tracked input.
    fn vjp(
        &mut self,
        op: &Op,
        out: NodeId,
        g: NodeId,
        tracked: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let on = |id: &NodeId| tracked[id.0];
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::StepMask(..) | Op::Detach(_) => {}
            Op::Add(a, b) => {
                if on(a) {
                    res.push((*a, g));
                }
                if on(b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if on(a) {
                    res.push((*a, g));
                }
                if on(b) {
                    res.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if on(a) {
                    res.push((*a, self.mul(g, *b)?));
                }
                if on(b) {
                    res.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Neg(a) => res.push((*a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((*a, self.scale(g, *c)?)),
            Op::AddScalar(a, _) => res.push((*a, g)),
            Op::Powf(a, p) => {
                let d = if *p == 1.0 {
                    g
                } else {
                    let pm1 = self.powf(*a, p - 1.0)?;
                    let d = self.scale(pm1, *p)?;
                    self.mul(g, d)?
                };
                res.push((*a, d));
            }
            Op::Exp(a) => res.push((*a, self.mul(g, out)?)),
            Op::Log(a) => {
                let inv = self.powf(*a, -1.0)?;
                res.push((*a, self.mul(g, inv)?));
            }
            Op::ClampMin(a, m) => {
                let mask = self.step_mask(*a, *m)?;
                res.push((*a, self.mul(g, mask)?));
            }
            Op::Relu(a) => {
                // right derivative at 0, so units sitting exactly at zero still learn
                let mask = self.step_mask_inclusive(*a, 0.0)?;
                res.push((*a, self.mul(g, mask)?));
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                let yy = self.mul(out, out)?;
                let d = self.sub(out, yy)?;
                res.push((*a, self.mul(g, d)?));
            }
            Op::Softmax(a) => {
                // y ⊙ (g - Σ g⊙y)
                let gy = self.mul(g, out)?;
                let axis = self.shape(out).len() - 1;
                let n = self.shape(out)[axis];
                let s = self.sum_axis(gy, axis)?;
                let s = self.expand(s, axis, n)?;
                let centered = self.sub(g, s)?;
                res.push((*a, self.mul(out, centered)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if on(a) {
                    let da = if *ta {
                        self.matmul_t(*b, *tb, g, true)?
                    } else {
                        self.matmul_t(g, false, *b, !tb)?
                    };
                    res.push((*a, da));
                }
                if on(b) {
                    let db = if *tb {
                        self.matmul_t(g, true, *a, *ta)?
                    } else {
                        self.matmul_t(*a, !ta, g, false)?
                    };
                    res.push((*b, db));
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*a, self.permute(g, &inv)?));
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(*a).to_vec();
                res.push((*a, self.reshape(g, &shape)?));
            }
            Op::SumAxis(a, axis) => {
                let n = self.shape(*a)[*axis];
                res.push((*a, self.expand(g, *axis, n)?));
            }
            Op::Expand(a, axis, _) => res.push((*a, self.sum_axis(g, *axis)?)),
            Op::Slice { x, axis, start, .. } => {
                let total = self.shape(*x)[*axis];
                res.push((*x, self.pad(g, *axis, *start, total)?));
            }
            Op::Pad { x, axis, start, .. } => {
                let len = self.shape(*x)[*axis];
                res.push((*x, self.slice(g, *axis, *start, len)?));
            }
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for x in xs {
                    let len = self.shape(*x)[*axis];
                    if on(x) {
                        res.push((*x, self.slice(g, *axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            // The three convolution ops are adjoints of one another, so
            // their gradients close over the same set.
            Op::Conv { x, w, geom } => {
                if on(x) {
                    res.push((*x, self.conv_input(g, *w, *geom)?));
                }
                if on(w) {
                    res.push((*w, self.conv_kernel(*x, g, *geom)?));
                }
            }
            Op::ConvInput { dy, w, geom } => {
                if on(dy) {
                    res.push((*dy, self.push_conv(g, *w, *geom)?));
                }
                if on(w) {
                    res.push((*w, self.conv_kernel(g, *dy, *geom)?));
                }
            }
            Op::ConvKernel { x, dy, geom } => {
                if on(x) {
                    res.push((*x, self.conv_input(*dy, g, *geom)?));
                }
                if on(dy) {
                    res.push((*dy, self.push_conv(*x, g, *geom)?));
                }
            }
            Op::PoolGather { x, reference } => {
                if on(x) {
                    res.push((*x, self.pool_scatter(g, *reference)?));
                }
            }
            Op::PoolScatter { x, reference } => {
                if on(x) {
                    res.push((*x, self.pool_gather(g, *reference)?));
                }
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph<f64>, name: &str, v: f64) -> NodeId {
        g.param(name, Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::<f64>::new();
        let x = scalar(&mut g, "x", 3.0);
        let y = g.mul(x, x).unwrap();
        let dx = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 6.0);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = scalar(&mut g, "x", 3.0);
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.mul(c, c).unwrap();
        let dx = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 0.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::<f64>::new();
        let x = scalar(&mut g, "x", 2.0);
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let dy = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dy).item(), 12.0);
        let d2y = g.grad(dy, &[x]).unwrap()[0];
        assert_eq!(g.value(d2y).item(), 12.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            g.grad(x, &[x]),
            Err(DiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn detach_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let x = scalar(&mut g, "x", 3.0);
        let d = g.detach(x).unwrap();
        let y = g.mul(d, x).unwrap();
        let dx = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 3.0);
    }
}
