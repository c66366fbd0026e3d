//! Eagerly evaluated computation graph.
//!
//! Every op is evaluated as soon as it is recorded, and the record keeps
//! enough structure to replay the whole graph after leaves are rebound
//! (see [`Graph::forward`]). Gradients built by [`Graph::grad`] are recorded
//! on the same graph as ordinary nodes, so they can be differentiated again.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shapes of a stride-1 convolution of `x (n×c×h×w)` with `w (o×c×kh×kw)`
/// under zero padding `(ph, pw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    fn valid(&self) -> bool {
        [self.n, self.c, self.h, self.w, self.o, self.kh, self.kw].iter().all(|&d| d > 0)
            && self.h + 2 * self.ph >= self.kh
            && self.w + 2 * self.pw >= self.kw
    }

    fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn kernel_shape(&self) -> [usize; 4] {
        [self.o, self.c, self.kh, self.kw]
    }

    fn output_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.out_h(), self.out_w()]
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Powf(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// 1 where `x > threshold`, else 0. Not differentiable.
    /// Threshold indicator; the flag makes the comparison inclusive.
    StepMask(NodeId, f64, bool),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// `op(a) · op(b)`, where the flags read the operand transposed.
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Sum over one axis, keeping it with extent 1.
    SumAxis(NodeId, usize),
    /// Repeat an extent-1 axis `n` times.
    Expand(NodeId, usize, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Embed `x` into zeros of extent `total` along `axis`, at offset `start`.
    Pad {
        x: NodeId,
        axis: usize,
        start: usize,
        total: usize,
    },
    Concat(Vec<NodeId>, usize),
    /// Stride-1 cross-correlation `x ⋆ w`.
    Conv { x: NodeId, w: NodeId, geom: ConvGeom },
    /// Adjoint of `Conv` in its input: maps an output-shaped `dy` to input shape.
    ConvInput { dy: NodeId, w: NodeId, geom: ConvGeom },
    /// Adjoint of `Conv` in its kernel: maps `x` and output-shaped `dy` to kernel shape.
    ConvKernel { x: NodeId, dy: NodeId, geom: ConvGeom },
    /// 2×2 max-pool of `x` at the argmax positions of `reference`.
    PoolGather {
        x: NodeId,
        reference: NodeId,
    },
    /// Adjoint of [`Op::PoolGather`]: scatter `x` into the argmax positions.
    PoolScatter {
        x: NodeId,
        reference: NodeId,
    },
    Detach(NodeId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Powf(..) => "powf",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::StepMask(..) => "step_mask",
            Op::Softmax(_) => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::SumAxis(..) => "sum_axis",
            Op::Expand(..) => "expand",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Concat(..) => "concat",
            Op::Conv { .. } => "conv",
            Op::ConvInput { .. } => "conv_input",
            Op::ConvKernel { .. } => "conv_kernel",
            Op::PoolGather { .. } => "max_pool2",
            Op::PoolScatter { .. } => "max_pool2_scatter",
            Op::Detach(_) => "detach",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::StepMask(a, _, _)
            | Op::Softmax(a)
            | Op::Permute(a, _)
            | Op::Reshape(a, _)
            | Op::SumAxis(a, _)
            | Op::Expand(a, _, _)

            | Op::Detach(a) => vec![*a],
            Op::Slice { x, .. } | Op::Pad { x, .. } => vec![*x],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::ConvInput { dy, w, .. } => vec![*dy, *w],
            Op::ConvKernel { x, dy, .. } => vec![*x, *dy],
            Op::Concat(xs, _) => xs.clone(),
            Op::PoolGather { x, reference } | Op::PoolScatter { x, reference } => {
                vec![*x, *reference]
            }
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op,
    pub(crate) value: Tensor<T>,
}

/// A recorded computation over tensors of element type `T`.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(node: usize, op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { node, op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Kind of op that produced `id`, e.g. `"matmul"`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Node registered under `name` by [`Graph::param`].
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Unnamed leaf (input data or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value)
    }

    /// Named leaf; names are unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        let id = self.leaf(value);
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Rebinds named leaves and re-evaluates every recorded op in order,
    /// returning the new value of `output`.
    pub fn forward(&mut self, bindings: &[(&str, Tensor<T>)], output: NodeId) -> Result<&Tensor<T>> {
        self.check(output)?;
        for (name, value) in bindings {
            let id = self
                .named(name)
                .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
            if value.shape() != self.shape(id) {
                return Err(mismatch(
                    id.0,
                    "leaf",
                    format!(
                        "binding for `{name}` has shape {:?}, expected {:?}",
                        value.shape(),
                        self.shape(id)
                    ),
                ));
            }
        }
        for (name, value) in bindings {
            let id = self.names[*name];
            self.nodes[id.0].value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let v = self.compute(&self.nodes[i].op, i)?;
            self.nodes[i].value = v;
        }
        Ok(self.value(output))
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::ForeignNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for i in op.inputs() {
            self.check(i)?;
        }
        let value = self.compute(&op, self.nodes.len())?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.push(Op::Powf(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> Result<NodeId> {
        self.push(Op::ClampMin(a, min))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    /// 1 where `a > threshold`, else 0.
    pub fn step_mask(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        self.push(Op::StepMask(a, threshold, false))
    }

    /// 1 where `a >= threshold`, else 0.
    pub fn step_mask_inclusive(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        self.push(Op::StepMask(a, threshold, true))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product reading `a` (if `ta`) and `b` (if `tb`) transposed,
    /// without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.push(Op::Permute(a, perm.to_vec()))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn expand(&mut self, a: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        self.push(Op::Expand(a, axis, n))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            x,
            axis,
            start,
            len,
        })
    }

    pub fn pad(&mut self, x: NodeId, axis: usize, start: usize, total: usize) -> Result<NodeId> {
        self.push(Op::Pad {
            x,
            axis,
            start,
            total,
        })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    /// Stride-1 cross-correlation of `x (n×c×h×w)` with `w (o×c×kh×kw)`,
    /// zero padding `(ph, pw)`; no bias.
    pub fn conv(&mut self, x: NodeId, w: NodeId, padding: (usize, usize)) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(DiffError::InvalidShape(format!(
                "conv input {xs:?} incompatible with kernel {ws:?}"
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            ph: padding.0,
            pw: padding.1,
        };
        self.push(Op::Conv { x, w, geom })
    }

    pub(crate) fn push_conv(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> Result<NodeId> {
        self.push(Op::Conv { x, w, geom })
    }

    pub(crate) fn conv_input(&mut self, dy: NodeId, w: NodeId, geom: ConvGeom) -> Result<NodeId> {
        self.push(Op::ConvInput { dy, w, geom })
    }

    pub(crate) fn conv_kernel(&mut self, x: NodeId, dy: NodeId, geom: ConvGeom) -> Result<NodeId> {
        self.push(Op::ConvKernel { x, dy, geom })
    }

    /// 2×2 max-pool with stride 2 over an `n×c×h×w` tensor.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::PoolGather { x, reference: x })
    }

    pub(crate) fn pool_gather(&mut self, x: NodeId, reference: NodeId) -> Result<NodeId> {
        self.push(Op::PoolGather { x, reference })
    }

    pub(crate) fn pool_scatter(&mut self, x: NodeId, reference: NodeId) -> Result<NodeId> {
        self.push(Op::PoolScatter { x, reference })
    }

    /// Identity in value, blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Detach(a))
    }

    fn same_shape(&self, node: usize, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                node,
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_conv(&self, node: usize, op: &'static str, geom: &ConvGeom, args: &[(NodeId, [usize; 4])]) -> Result<()> {
        for (id, want) in args {
            if !geom.valid() || self.shape(*id) != want {
                return Err(mismatch(
                    node,
                    op,
                    format!("operand {:?} does not fit {geom:?}", self.shape(*id)),
                ));
            }
        }
        Ok(())
    }

    fn compute(&self, op: &Op, node: usize) -> Result<Tensor<T>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let name = op.name();
        let t = match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::Add(a, b) => {
                self.same_shape(node, name, *a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                self.same_shape(node, name, *a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                self.same_shape(node, name, *a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x * y)
            }
            Op::Neg(a) => v(*a).map(|x| -x),
            Op::Scale(a, c) => {
                let c = T::from_f64_lossy(*c);
                v(*a).map(|x| x * c)
            }
            Op::AddScalar(a, c) => {
                let c = T::from_f64_lossy(*c);
                v(*a).map(|x| x + c)
            }
            Op::Powf(a, p) => {
                let p = T::from_f64_lossy(*p);
                v(*a).map(|x| x.powf(p))
            }
            Op::Exp(a) => v(*a).map(|x| x.exp()),
            Op::Log(a) => v(*a).map(|x| x.ln()),
            Op::ClampMin(a, m) => {
                let m = T::from_f64_lossy(*m);
                v(*a).map(|x| if x > m { x } else { m })
            }
            Op::Relu(a) => v(*a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Sigmoid(a) => v(*a).map(|x| T::one() / (T::one() + (-x).exp())),
            Op::StepMask(a, thr, inclusive) => {
                let thr = T::from_f64_lossy(*thr);
                let inclusive = *inclusive;
                v(*a).map(|x| if x > thr || (inclusive && x == thr) { T::one() } else { T::zero() })
            }
            Op::Softmax(a) => softmax_last(v(*a)),
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.len() != 2 || sb.len() != 2 {
                    return Err(mismatch(node, name, format!("{sa:?} · {sb:?}")));
                }
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let (k2, n) = if *tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if k != k2 {
                    return Err(mismatch(node, name, format!("{sa:?} (t={ta}) · {sb:?} (t={tb})")));
                }
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, v(*a).data(), *ta, v(*b).data(), *tb, &mut out);
                Tensor::from_parts(vec![m, n], out)
            }
            Op::Permute(a, perm) => {
                let shape = self.shape(*a);
                let mut seen = vec![false; shape.len()];
                let ok = perm.len() == shape.len()
                    && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
                if !ok {
                    return Err(mismatch(node, name, format!("perm {perm:?} for {shape:?}")));
                }
                permute(v(*a), perm)
            }
            Op::Reshape(a, shape) => {
                let numel: usize = shape.iter().product();
                if numel != v(*a).numel() || shape.iter().any(|&d| d == 0) {
                    return Err(mismatch(
                        node,
                        name,
                        format!("{:?} into {shape:?}", self.shape(*a)),
                    ));
                }
                Tensor::from_parts(shape.clone(), v(*a).data().to_vec())
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a);
                if *axis >= shape.len() {
                    return Err(mismatch(node, name, format!("axis {axis} of {shape:?}")));
                }
                sum_axis(v(*a), *axis)
            }
            Op::Expand(a, axis, n) => {
                let shape = self.shape(*a);
                if *axis >= shape.len() || shape[*axis] != 1 || *n == 0 {
                    return Err(mismatch(
                        node,
                        name,
                        format!("axis {axis} of {shape:?} to {n}"),
                    ));
                }
                expand(v(*a), *axis, *n)
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let shape = self.shape(*x);
                if *axis >= shape.len() || *len == 0 || start + len > shape[*axis] {
                    return Err(mismatch(
                        node,
                        name,
                        format!("[{start}..{}] on axis {axis} of {shape:?}", start + len),
                    ));
                }
                slice(v(*x), *axis, *start, *len)
            }
            Op::Pad {
                x,
                axis,
                start,
                total,
            } => {
                let shape = self.shape(*x);
                if *axis >= shape.len() || start + shape[*axis] > *total {
                    return Err(mismatch(
                        node,
                        name,
                        format!("{shape:?} at {start} into {total} on axis {axis}"),
                    ));
                }
                pad(v(*x), *axis, *start, *total)
            }
            Op::Concat(xs, axis) => {
                if xs.is_empty() {
                    return Err(mismatch(node, name, "no inputs".into()));
                }
                let first = self.shape(xs[0]).to_vec();
                if *axis >= first.len() {
                    return Err(mismatch(node, name, format!("axis {axis} of {first:?}")));
                }
                for x in xs {
                    let s = self.shape(*x);
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b);
                    if !compatible {
                        return Err(mismatch(node, name, format!("{first:?} with {s:?}")));
                    }
                }
                let parts: Vec<&Tensor<T>> = xs.iter().map(|x| v(*x)).collect();
                concat(&parts, *axis)
            }
            Op::Conv { x, w, geom } => {
                self.check_conv(node, name, geom, &[(*x, geom.input_shape()), (*w, geom.kernel_shape())])?;
                conv_forward(v(*x), v(*w), geom)
            }
            Op::ConvInput { dy, w, geom } => {
                self.check_conv(node, name, geom, &[(*dy, geom.output_shape()), (*w, geom.kernel_shape())])?;
                conv_input(v(*dy), v(*w), geom)
            }
            Op::ConvKernel { x, dy, geom } => {
                self.check_conv(node, name, geom, &[(*x, geom.input_shape()), (*dy, geom.output_shape())])?;
                conv_kernel(v(*x), v(*dy), geom)
            }
            Op::PoolGather { x, reference } => {
                let rs = self.shape(*reference);
                if rs.len() != 4 || rs[2] % 2 != 0 || rs[3] % 2 != 0 || self.shape(*x) != rs {
                    return Err(mismatch(
                        node,
                        name,
                        format!("{:?} needs an n×c×h×w input with even h, w", self.shape(*x)),
                    ));
                }
                let idx = pool_argmax(v(*reference));
                let src = v(*x).data();
                let mut shape = rs.to_vec();
                shape[2] /= 2;
                shape[3] /= 2;
                Tensor::from_parts(shape, idx.iter().map(|&i| src[i]).collect())
            }
            Op::PoolScatter { x, reference } => {
                let rs = self.shape(*reference);
                let xs = self.shape(*x);
                if rs.len() != 4
                    || rs[2] % 2 != 0
                    || rs[3] % 2 != 0
                    || xs != [rs[0], rs[1], rs[2] / 2, rs[3] / 2]
                {
                    return Err(mismatch(node, name, format!("{xs:?} into {rs:?}")));
                }
                let idx = pool_argmax(v(*reference));
                let mut out = vec![T::zero(); v(*reference).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    out[i] = out[i] + v(*x).data()[k];
                }
                Tensor::from_parts(rs.to_vec(), out)
            }
            Op::Detach(a) => v(*a).clone(),
        };
        Ok(t)
    }
}

fn softmax_last<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum = sum + *e;
        }
        for e in row.iter_mut() {
            *e = *e / sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], ps[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for k in 0..inner_n {
            out.push(src[base + k * inner_s]);
        }
        // advance the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += ps[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= ps[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum in eight interleaved lanes, which the compiler can vectorize.
fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + v;
        }
    }
    let mut total = tail.iter().fold(T::zero(), |a, &v| a + v);
    for a in acc {
        total = total + a;
    }
    total
}

fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let src = x.data();
    if inner == 1 {
        let out = src.chunks_exact(n).map(lane_sum).collect();
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        return Tensor::from_parts(shape, out);
    }
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_parts(shape, out)
}

fn expand<T: Real>(x: &Tensor<T>, axis: usize, n: usize) -> Tensor<T> {
    let (outer, _, inner) = split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    if inner == 1 {
        for &v in src {
            out.extend(std::iter::repeat(v).take(n));
        }
    } else {
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = n;
    Tensor::from_parts(shape, out)
}

fn slice<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * n + start) * inner;
        out.extend_from_slice(&src[from..from + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

fn pad<T: Real>(x: &Tensor<T>, axis: usize, start: usize, total: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let to = (o * total + start) * inner;
        out[to..to + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, out)
}

fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, out)
}

/// Output positions `[lo, hi)` along one axis that read input at offset
/// `k - pad` inside `[0, extent)`.
fn out_span(k: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = out.min((extent + pad).saturating_sub(k));
    (lo, hi.max(lo))
}

/// Calls `f(kernel, input_row, output_row, len)` for every contiguous run of
/// output pixels touched by one kernel tap, where the offsets index the flat
/// kernel, input and output buffers.
fn conv_runs(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for n in 0..g.n {
        for o in 0..g.o {
            let out_plane = (n * g.o + o) * ho * wo;
            for c in 0..g.c {
                let in_plane = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = out_span(ky, g.ph, g.h, ho);
                    for kx in 0..g.kw {
                        let (x0, x1) = out_span(kx, g.pw, g.w, wo);
                        if x1 == x0 {
                            continue;
                        }
                        let k = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        for oy in y0..y1 {
                            let iy = oy + ky - g.ph;
                            let input = in_plane + iy * g.w + x0 + kx - g.pw;
                            f(k, input, out_plane + oy * wo + x0, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (src, ker) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.output_shape().iter().product()];
    conv_runs(g, |k, i, o, len| {
        let wv = ker[k];
        for (y, &xv) in out[o..o + len].iter_mut().zip(&src[i..i + len]) {
            *y = *y + wv * xv;
        }
    });
    Tensor::from_parts(g.output_shape().to_vec(), out)
}

fn conv_input<T: Real>(dy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (grad, ker) = (dy.data(), w.data());
    let mut out = vec![T::zero(); g.input_shape().iter().product()];
    conv_runs(g, |k, i, o, len| {
        let wv = ker[k];
        for (d, &gv) in out[i..i + len].iter_mut().zip(&grad[o..o + len]) {
            *d = *d + wv * gv;
        }
    });
    Tensor::from_parts(g.input_shape().to_vec(), out)
}

fn conv_kernel<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (src, grad) = (x.data(), dy.data());
    let mut out = vec![T::zero(); g.kernel_shape().iter().product()];
    // elementwise products accumulate per tap and reduce once at the end
    let mut acc = vec![T::zero(); out.len() * g.out_w()];
    let wo = g.out_w();
    conv_runs(g, |k, i, o, len| {
        let lane = &mut acc[k * wo..k * wo + len];
        for ((a, &xv), &gv) in lane.iter_mut().zip(&src[i..i + len]).zip(&grad[o..o + len]) {
            *a = *a + xv * gv;
        }
    });
    for (k, v) in out.iter_mut().enumerate() {
        *v = lane_sum(&acc[k * wo..(k + 1) * wo]);
    }
    Tensor::from_parts(g.kernel_shape().to_vec(), out)
}

/// Flat input offsets of the maximum in each 2×2 window (first wins on ties).
fn pool_argmax<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let src = x.data();
    let mut idx = Vec::with_capacity(nc * h * w / 4);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let cands = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
