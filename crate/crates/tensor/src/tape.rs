//! The recording tape: eagerly-evaluated ops on dynamic-rank arrays with
//! reverse-mode differentiation that can itself be recorded.
//!
//! `backward` emits gradient nodes built from the same op set, so calling
//! `backward` on a value computed *from gradients* is valid — each op's
//! vector-Jacobian product is expressed in ops that themselves have
//! correct vector-Jacobian products (the conv2d triad is closed under
//! differentiation, linear ops come in adjoint pairs, pointwise ops use
//! value-captured masks).

use crate::kernels;
use crate::Scalar;
use ndarray::{ArcArray, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn, Slice};
use std::cell::{Cell, Ref, RefCell};

/// Node values share buffers (cheap reshape/detach); ops never mutate them.
pub type Value<T> = ArcArray<T, IxDyn>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleF64(NodeId, f64),
    AddScalar(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Matmul(NodeId, NodeId),
    /// `a^T @ b` without materializing the transpose.
    MatmulTN(NodeId, NodeId),
    /// `a @ b^T` without materializing the transpose.
    MatmulNT(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    SumAxis(NodeId, usize),
    SumAll(NodeId),
    BroadcastAxis(NodeId, usize),
    BroadcastScalar(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    PadZero {
        a: NodeId,
        axis: usize,
        before: usize,
    },
    Flip(NodeId, usize),
    /// Row-standardize a 2-D node: `y = (x - mean_row) / sqrt(var_row + eps)`.
    NormRows(NodeId, f64),
    /// `y = x @ w^T + b` for `x: [M, in]`, `w: [out, in]`, `b: [out]`.
    Linear(NodeId, NodeId, NodeId),
    /// `y[i, j] = a[i, j] * s[i] + t[i]`.
    MulAddRows(NodeId, NodeId, NodeId),
    /// `y[i, j] = a[i, j] * s[j] + t[j]`.
    MulAddCols(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    /// Softmax over the last axis.
    SoftmaxLast(NodeId),
    /// `g * (a > 0)` — relu's vjp as one pass.
    ReluBwd(NodeId, NodeId),
    /// Elementwise gelu derivative.
    GeluDeriv(NodeId),
    /// Per-row reciprocal standard deviation of a 2-D node.
    RowRstd(NodeId, f64),
    /// Per-row dot product of two same-shape 2-D nodes.
    RowDot(NodeId, NodeId),
    /// `(g - s1[i] - y*s2[i]) * s3[i]` — the norm-rows vjp as one pass.
    RowCombine(NodeId, NodeId, NodeId, NodeId, NodeId),
    /// `y * (g - rowsum(g*y))` — softmax's vjp as one pass.
    SoftmaxVjp(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvBwdInput {
        g: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvBwdKernel {
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
    },
    AvgPool(NodeId, usize),
    AvgUnpool(NodeId, usize),
    Resize(NodeId),
    ResizeAdj(NodeId),
}


impl Op {
    fn for_each_parent(&self, f: &mut impl FnMut(NodeId)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulTN(a, b)
            | Op::MatmulNT(a, b)
            | Op::Bmm(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Linear(a, b, c) | Op::MulAddRows(a, b, c) | Op::MulAddCols(a, b, c) => {
                f(*a);
                f(*b);
                f(*c);
            }
            Op::ReluBwd(a, b) | Op::RowDot(a, b) | Op::SoftmaxVjp(a, b) => {
                f(*a);
                f(*b);
            }
            Op::RowCombine(a, b, c, d, e) => {
                f(*a);
                f(*b);
                f(*c);
                f(*d);
                f(*e);
            }
            Op::GeluDeriv(a) | Op::RowRstd(a, _) => f(*a),
            Op::ScaleF64(a, _)
            | Op::AddScalar(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::SoftmaxLast(a)
            | Op::NormRows(a, _)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::BroadcastAxis(a, _)
            | Op::BroadcastScalar(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice { a, .. }
            | Op::PadZero { a, .. }
            | Op::Flip(a, _)
            | Op::AvgPool(a, _)
            | Op::AvgUnpool(a, _)
            | Op::Resize(a)
            | Op::ResizeAdj(a) => f(*a),
            Op::Concat(parts, _) => parts.iter().for_each(|p| f(*p)),
            Op::Conv2d { x, k, .. } => {
                f(*x);
                f(*k);
            }
            Op::ConvBwdInput { g, k, .. } => {
                f(*g);
                f(*k);
            }
            Op::ConvBwdKernel { x, g, .. } => {
                f(*x);
                f(*g);
            }
        }
    }
}

struct Node<T: Scalar> {
    value: Value<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradient nodes produced by one backward pass, indexed by source node.
pub struct Grads {
    g: Vec<Option<NodeId>>,
}

impl Grads {
    /// Gradient node of the backward root with respect to `id`, if `id`
    /// participated in the computation.
    pub fn wrt(&self, id: NodeId) -> Option<NodeId> {
        self.g.get(id.idx()).copied().flatten()
    }
}

/// A recording of eagerly-evaluated array ops.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    no_grad: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op, requires_grad: bool) -> NodeId {
        self.push_shared(value.into_shared(), op, requires_grad)
    }

    fn push_shared(&self, value: Value<T>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        let rg = requires_grad && !self.no_grad.get();
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len() as u32);
        nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.idx()].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        let n = self.nodes.borrow();
        n[a.idx()].requires_grad || n[b.idx()].requires_grad
    }

    /// Borrow a node's value. Do not hold the guard across other tape calls.
    pub fn value(&self, id: NodeId) -> Ref<'_, Value<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.idx()].value)
    }

    pub fn value_owned(&self, id: NodeId) -> ArrayD<T> {
        self.nodes.borrow()[id.idx()].value.to_owned()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.idx()].value.shape().to_vec()
    }

    /// Scalar read of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> T {
        let nodes = self.nodes.borrow();
        let v = &nodes[id.idx()].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable leaf.
    pub fn var(&self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&self, v: T) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Same value as `id`, as a constant leaf (stop-gradient); shares the
    /// underlying buffer.
    pub fn detach(&self, id: NodeId) -> NodeId {
        let v = self.nodes.borrow()[id.idx()].value.clone();
        self.push_shared(v, Op::Leaf, false)
    }

    // ---- pointwise ----------------------------------------------------

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let (va, vb) = (&n[a.idx()].value, &n[b.idx()].value);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        };
        self.push(v, Op::Add(a, b), self.rg2(a, b))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let (va, vb) = (&n[a.idx()].value, &n[b.idx()].value);
            assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
            va - vb
        };
        self.push(v, Op::Sub(a, b), self.rg2(a, b))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let (va, vb) = (&n[a.idx()].value, &n[b.idx()].value);
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        };
        self.push(v, Op::Mul(a, b), self.rg2(a, b))
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let cv = crate::lit::<T>(c);
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x * cv);
        self.push(v, Op::ScaleF64(a, c), self.rg(a))
    }

    pub fn add_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let cv = crate::lit::<T>(c);
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x + cv);
        self.push(v, Op::AddScalar(a), self.rg(a))
    }

    pub fn neg(&self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn recip(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.recip());
        self.push(v, Op::Recip(a), self.rg(a))
    }

    pub fn sqrt(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a), self.rg(a))
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a), self.rg(a))
    }

    pub fn ln(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a), self.rg(a))
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a), self.rg(a))
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), self.rg(a))
    }

    // ---- linear algebra ------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let va = n[a.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            let vb = n[b.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            kernels::matmul(va, vb).into_dyn()
        };
        self.push(v, Op::Matmul(a, b), self.rg2(a, b))
    }

    /// `a^T @ b` (transpose handled by strided gemm, no copy).
    pub fn matmul_tn(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let va = n[a.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            let vb = n[b.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            kernels::matmul(va.t(), vb).into_dyn()
        };
        self.push(v, Op::MatmulTN(a, b), self.rg2(a, b))
    }

    /// `a @ b^T` (transpose handled by strided gemm, no copy).
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let va = n[a.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            let vb = n[b.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            kernels::matmul(va, vb.t()).into_dyn()
        };
        self.push(v, Op::MatmulNT(a, b), self.rg2(a, b))
    }

    /// Batched 3-D matrix product over the leading axis.
    pub fn bmm(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let va = n[a.idx()].value.view().into_dimensionality::<Ix3>().unwrap();
            let vb = n[b.idx()].value.view().into_dimensionality::<Ix3>().unwrap();
            kernels::bmm(va, vb).into_dyn()
        };
        self.push(v, Op::Bmm(a, b), self.rg2(a, b))
    }

    // ---- reductions / shape --------------------------------------------

    pub fn sum_axis(&self, a: NodeId, axis: usize) -> NodeId {
        let v = self.nodes.borrow()[a.idx()].value.sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(a, axis), self.rg(a))
    }

    /// Sum of all entries as a 0-d node.
    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let s = self.nodes.borrow()[a.idx()].value.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll(a),
            self.rg(a),
        )
    }

    pub fn mean_all(&self, a: NodeId) -> NodeId {
        let len = self.nodes.borrow()[a.idx()].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / len as f64)
    }

    /// Insert a new axis of length `n` at `axis`, repeating entries.
    pub fn broadcast_axis(&self, a: NodeId, axis: usize, n: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let src = va.as_slice().expect("standard layout");
            let in_shape = va.shape();
            let in_strides = kernels::contiguous_strides(in_shape);
            let mut shape = in_shape.to_vec();
            shape.insert(axis, n);
            let mut strides = in_strides;
            strides.insert(axis, 0);
            let data = kernels::gather_copy(src, 0, &shape, &strides);
            ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
        };
        self.push(v, Op::BroadcastAxis(a, axis), self.rg(a))
    }

    /// Fill `shape` with the value of a 0-d node.
    pub fn broadcast_scalar(&self, a: NodeId, shape: &[usize]) -> NodeId {
        let s = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.idx()].value;
            assert_eq!(v.len(), 1, "broadcast_scalar on non-scalar");
            v.iter().next().copied().unwrap()
        };
        self.push(
            ArrayD::from_elem(IxDyn(shape), s),
            Op::BroadcastScalar(a),
            self.rg(a),
        )
    }

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape size");
            va.clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape on standard layout")
        };
        self.push_shared(v, Op::Reshape(a), self.rg(a))
    }

    pub fn permute(&self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let src = va.as_slice().expect("standard layout");
            let in_shape = va.shape();
            let in_strides = kernels::contiguous_strides(in_shape);
            let shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
            let strides: Vec<isize> = axes.iter().map(|&ax| in_strides[ax]).collect();
            let data = kernels::gather_copy(src, 0, &shape, &strides);
            ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
        };
        self.push(v, Op::Permute(a, axes.to_vec()), self.rg(a))
    }

    pub fn concat(&self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.idx()].value.view()).collect();
            let cat = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
            if cat.is_standard_layout() {
                cat
            } else {
                cat.as_standard_layout().to_owned()
            }
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Single-axis slice `[start, end)`.
    pub fn slice_axis(&self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let src = va.as_slice().expect("standard layout");
            let strides = kernels::contiguous_strides(va.shape());
            let mut shape = va.shape().to_vec();
            assert!(start <= end && end <= shape[axis], "slice bounds");
            shape[axis] = end - start;
            let offset = start as isize * strides[axis];
            let data = kernels::gather_copy(src, offset, &shape, &strides);
            ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
        };
        self.push(v, Op::Slice { a, axis, start, end }, self.rg(a))
    }

    /// Zero-pad along one axis.
    pub fn pad_zero(&self, a: NodeId, axis: usize, before: usize, after: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let mut shape = va.shape().to_vec();
            let orig = shape[axis];
            shape[axis] += before + after;
            let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
            out.slice_axis_mut(Axis(axis), Slice::from(before..before + orig))
                .assign(va);
            out
        };
        self.push(v, Op::PadZero { a, axis, before }, self.rg(a))
    }

    pub fn flip(&self, a: NodeId, axis: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let src = va.as_slice().expect("standard layout");
            let shape = va.shape().to_vec();
            let mut strides = kernels::contiguous_strides(&shape);
            let offset = (shape[axis] as isize - 1) * strides[axis];
            strides[axis] = -strides[axis];
            let data = kernels::gather_copy(src, offset, &shape, &strides);
            ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
        };
        self.push(v, Op::Flip(a, axis), self.rg(a))
    }

    // ---- fused nn ops ----------------------------------------------------

    /// Standardize each row of a 2-D node to zero mean, unit variance.
    pub fn norm_rows(&self, a: NodeId, eps: f64) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let shape = va.shape();
            assert_eq!(shape.len(), 2, "norm_rows expects [M, D]");
            let (m, d) = (shape[0], shape[1]);
            let src = va.as_slice().unwrap();
            let mut out = Vec::with_capacity(m * d);
            let inv_d = 1.0 / d as f64;
            for row in src.chunks_exact(d) {
                let mean = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() * inv_d;
                let var = row
                    .iter()
                    .map(|v| {
                        let c = v.to_f64().unwrap() - mean;
                        c * c
                    })
                    .sum::<f64>()
                    * inv_d;
                let rstd = 1.0 / (var + eps).sqrt();
                for v in row {
                    out.push(crate::lit::<T>((v.to_f64().unwrap() - mean) * rstd));
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[m, d]), out).unwrap()
        };
        self.push(v, Op::NormRows(a, eps), self.rg(a))
    }

    /// `x @ w^T + b` in one node.
    pub fn linear(&self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let vx = nodes[x.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            let vw = nodes[w.idx()].value.view().into_dimensionality::<Ix2>().unwrap();
            let vb = &nodes[b.idx()].value;
            let mut y = kernels::matmul(vx, vw.t());
            let bs = vb.as_slice().unwrap();
            for mut row in y.rows_mut() {
                for (o, &bv) in row.iter_mut().zip(bs) {
                    *o = *o + bv;
                }
            }
            y.into_dyn()
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Linear(x, w, b), rg)
    }

    /// Per-row affine: `a[i, :] * s[i] + t[i]`.
    pub fn mul_add_rows(&self, a: NodeId, s: NodeId, t: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let (m, d) = (va.shape()[0], va.shape()[1]);
            let vs = nodes[s.idx()].value.as_slice().unwrap().to_vec();
            let vt = nodes[t.idx()].value.as_slice().unwrap().to_vec();
            assert_eq!(vs.len(), m, "mul_add_rows scale length");
            let src = va.as_slice().unwrap();
            let mut out = Vec::with_capacity(m * d);
            for (i, row) in src.chunks_exact(d).enumerate() {
                let (sc, tr) = (vs[i], vt[i]);
                for &v in row {
                    out.push(v * sc + tr);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[m, d]), out).unwrap()
        };
        let rg = self.rg(a) || self.rg(s) || self.rg(t);
        self.push(v, Op::MulAddRows(a, s, t), rg)
    }

    /// Per-column affine: `a[:, j] * s[j] + t[j]`.
    pub fn mul_add_cols(&self, a: NodeId, s: NodeId, t: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let (m, d) = (va.shape()[0], va.shape()[1]);
            let vs = nodes[s.idx()].value.as_slice().unwrap().to_vec();
            let vt = nodes[t.idx()].value.as_slice().unwrap().to_vec();
            assert_eq!(vs.len(), d, "mul_add_cols scale length");
            let src = va.as_slice().unwrap();
            let mut out = Vec::with_capacity(m * d);
            for row in src.chunks_exact(d) {
                for ((&v, &sc), &tr) in row.iter().zip(&vs).zip(&vt) {
                    out.push(v * sc + tr);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[m, d]), out).unwrap()
        };
        let rg = self.rg(a) || self.rg(s) || self.rg(t);
        self.push(v, Op::MulAddCols(a, s, t), rg)
    }

    /// tanh-approximation GELU, one fused pass.
    pub fn gelu(&self, a: NodeId) -> NodeId {
        let c = crate::lit::<T>((2.0 / std::f64::consts::PI).sqrt());
        let alpha = crate::lit::<T>(0.044715);
        let half = crate::lit::<T>(0.5);
        let one = T::one();
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| {
            let u = (c * (x + alpha * x * x * x)).tanh();
            half * x * (one + u)
        });
        self.push(v, Op::Gelu(a), self.rg(a))
    }

    /// Numerically-shifted softmax over the last axis.
    pub fn softmax_last(&self, a: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let shape = va.shape().to_vec();
            let d = *shape.last().expect("softmax needs an axis");
            let src = va.as_slice().unwrap();
            let mut out: Vec<T> = Vec::with_capacity(src.len());
            for row in src.chunks_exact(d) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                let base = out.len();
                for &v in row {
                    let e = (v - m).exp();
                    sum = sum + e;
                    out.push(e);
                }
                let inv = sum.recip();
                for v in &mut out[base..] {
                    *v = *v * inv;
                }
            }
            ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
        };
        self.push(v, Op::SoftmaxLast(a), self.rg(a))
    }

    /// `g * (a > 0)` in one pass.
    pub fn relu_bwd(&self, a: NodeId, g: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vg) = (&nodes[a.idx()].value, &nodes[g.idx()].value);
            assert_eq!(va.shape(), vg.shape(), "relu_bwd shape mismatch");
            let mut out = Vec::with_capacity(va.len());
            for (&x, &gv) in va.iter().zip(vg.iter()) {
                out.push(if x > T::zero() { gv } else { T::zero() });
            }
            ArrayD::from_shape_vec(va.raw_dim(), out).unwrap()
        };
        let rg = self.rg2(a, g);
        self.push(v, Op::ReluBwd(a, g), rg)
    }

    /// Elementwise tanh-approximation gelu derivative.
    pub fn gelu_deriv(&self, a: NodeId) -> NodeId {
        let c = crate::lit::<T>((2.0 / std::f64::consts::PI).sqrt());
        let alpha = crate::lit::<T>(0.044715);
        let three = crate::lit::<T>(3.0);
        let half = crate::lit::<T>(0.5);
        let one = T::one();
        let v = self.nodes.borrow()[a.idx()].value.mapv(|x| {
            let u = c * (x + alpha * x * x * x);
            let th = u.tanh();
            let sech2 = one - th * th;
            let du = c * (one + three * alpha * x * x);
            half * (one + th) + half * x * sech2 * du
        });
        self.push(v, Op::GeluDeriv(a), self.rg(a))
    }

    /// `1 / sqrt(var_row + eps)` per row of a 2-D node.
    pub fn row_rstd(&self, a: NodeId, eps: f64) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.idx()].value;
            let (m, d) = (va.shape()[0], va.shape()[1]);
            let src = va.as_slice().unwrap();
            let inv_d = 1.0 / d as f64;
            let mut out = Vec::with_capacity(m);
            for row in src.chunks_exact(d) {
                let mean = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() * inv_d;
                let var = row
                    .iter()
                    .map(|v| {
                        let c = v.to_f64().unwrap() - mean;
                        c * c
                    })
                    .sum::<f64>()
                    * inv_d;
                out.push(crate::lit::<T>(1.0 / (var + eps).sqrt()));
            }
            ArrayD::from_shape_vec(IxDyn(&[m]), out).unwrap()
        };
        self.push(v, Op::RowRstd(a, eps), self.rg(a))
    }

    /// `out[i] = sum_j a[i,j] * b[i,j]`.
    pub fn row_dot(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.idx()].value, &nodes[b.idx()].value);
            assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
            let (m, d) = (va.shape()[0], va.shape()[1]);
            let (sa, sb) = (va.as_slice().unwrap(), vb.as_slice().unwrap());
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let mut acc = T::zero();
                for j in 0..d {
                    acc = acc + sa[i * d + j] * sb[i * d + j];
                }
                out.push(acc);
            }
            ArrayD::from_shape_vec(IxDyn(&[m]), out).unwrap()
        };
        self.push(v, Op::RowDot(a, b), self.rg2(a, b))
    }

    /// `(g[i,j] - s1[i] - y[i,j]*s2[i]) * s3[i]` in one pass.
    pub fn row_combine(&self, g: NodeId, y: NodeId, s1: NodeId, s2: NodeId, s3: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (vg, vy) = (&nodes[g.idx()].value, &nodes[y.idx()].value);
            assert_eq!(vg.shape(), vy.shape(), "row_combine shape mismatch");
            let (m, d) = (vg.shape()[0], vg.shape()[1]);
            let (sg, sy) = (vg.as_slice().unwrap(), vy.as_slice().unwrap());
            let v1 = nodes[s1.idx()].value.as_slice().unwrap().to_vec();
            let v2 = nodes[s2.idx()].value.as_slice().unwrap().to_vec();
            let v3 = nodes[s3.idx()].value.as_slice().unwrap().to_vec();
            let mut out = Vec::with_capacity(m * d);
            for i in 0..m {
                for j in 0..d {
                    let idx = i * d + j;
                    out.push((sg[idx] - v1[i] - sy[idx] * v2[i]) * v3[i]);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[m, d]), out).unwrap()
        };
        let rg = self.rg(g) || self.rg(y) || self.rg(s1) || self.rg(s2) || self.rg(s3);
        self.push(v, Op::RowCombine(g, y, s1, s2, s3), rg)
    }

    /// `y * (g - rowsum(g*y))` in one pass (softmax backward over the last axis).
    pub fn softmax_vjp(&self, y: NodeId, g: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (vy, vg) = (&nodes[y.idx()].value, &nodes[g.idx()].value);
            assert_eq!(vy.shape(), vg.shape(), "softmax_vjp shape mismatch");
            let shape = vy.shape().to_vec();
            let d = *shape.last().unwrap();
            let (sy, sg) = (vy.as_slice().unwrap(), vg.as_slice().unwrap());
            let mut out = Vec::with_capacity(sy.len());
            for (ry, rg_row) in sy.chunks_exact(d).zip(sg.chunks_exact(d)) {
                let mut s = T::zero();
                for j in 0..d {
                    s = s + ry[j] * rg_row[j];
                }
                for j in 0..d {
                    out.push(ry[j] * (rg_row[j] - s));
                }
            }
            ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
        };
        self.push(v, Op::SoftmaxVjp(y, g), self.rg2(y, g))
    }

    // ---- conv / pool / resize -------------------------------------------

    pub fn conv2d(&self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vx = n[x.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            let vk = n[k.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::conv2d(vx, vk, stride, pad).into_dyn()
        };
        self.push(v, Op::Conv2d { x, k, stride, pad }, self.rg2(x, k))
    }

    pub fn conv2d_bwd_input(
        &self,
        g: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
    ) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vg = n[g.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            let vk = n[k.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::conv2d_bwd_input(vg, vk, stride, pad, in_hw).into_dyn()
        };
        self.push(v, Op::ConvBwdInput { g, k, stride, pad }, self.rg2(g, k))
    }

    pub fn conv2d_bwd_kernel(
        &self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        k_hw: (usize, usize),
    ) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vx = n[x.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            let vg = n[g.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::conv2d_bwd_kernel(vx, vg, stride, pad, k_hw).into_dyn()
        };
        self.push(v, Op::ConvBwdKernel { x, g, stride, pad }, self.rg2(x, g))
    }

    pub fn avg_pool2d(&self, x: NodeId, k: usize) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vx = n[x.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::avg_pool2d(vx, k).into_dyn()
        };
        self.push(v, Op::AvgPool(x, k), self.rg(x))
    }

    pub fn avg_unpool2d(&self, g: NodeId, k: usize, in_hw: (usize, usize)) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vg = n[g.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::avg_unpool2d(vg, k, in_hw).into_dyn()
        };
        self.push(v, Op::AvgUnpool(g, k), self.rg(g))
    }

    pub fn bilinear_resize(&self, x: NodeId, out_hw: (usize, usize)) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vx = n[x.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::bilinear_resize(vx, out_hw).into_dyn()
        };
        self.push(v, Op::Resize(x), self.rg(x))
    }

    pub fn bilinear_resize_adj(&self, g: NodeId, in_hw: (usize, usize)) -> NodeId {
        let v = {
            let n = self.nodes.borrow();
            let vg = n[g.idx()].value.view().into_dimensionality::<Ix4>().unwrap();
            kernels::bilinear_resize_adj(vg, in_hw).into_dyn()
        };
        self.push(v, Op::ResizeAdj(g), self.rg(g))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode pass from a scalar `root`. Returns gradient nodes for
    /// every participating node. With `create_graph = false` the produced
    /// nodes are marked non-differentiable (cheaper for later passes on the
    /// same tape); with `true` they can be differentiated again.
    pub fn backward(&self, root: NodeId, create_graph: bool) -> Grads {
        self.backward_impl(root, None, create_graph)
    }

    /// Like [`Tape::backward`] but prunes the pass to paths that reach one
    /// of the `wrt` leaves; gradients of other nodes are never built.
    pub fn backward_wrt(&self, root: NodeId, wrt: &[NodeId], create_graph: bool) -> Grads {
        self.backward_impl(root, Some(wrt), create_graph)
    }

    fn backward_impl(&self, root: NodeId, wrt: Option<&[NodeId]>, create_graph: bool) -> Grads {
        assert_eq!(
            self.nodes.borrow()[root.idx()].value.len(),
            1,
            "backward root must be scalar"
        );
        // needed[i]: differentiating through node i can contribute to a
        // requested leaf (every rg node when wrt is None)
        let needed: Vec<bool> = {
            let nodes = self.nodes.borrow();
            match wrt {
                None => nodes[..=root.idx()].iter().map(|n| n.requires_grad).collect(),
                Some(wrt) => {
                    let mut needed = vec![false; root.idx() + 1];
                    for id in wrt {
                        if id.idx() <= root.idx() && nodes[id.idx()].requires_grad {
                            needed[id.idx()] = true;
                        }
                    }
                    for i in 0..=root.idx() {
                        if needed[i] || !nodes[i].requires_grad {
                            continue;
                        }
                        let mut any = false;
                        nodes[i].op.for_each_parent(&mut |p: NodeId| {
                            any = any || needed[p.idx()];
                        });
                        needed[i] = any;
                    }
                    needed
                }
            }
        };
        let prev_no_grad = self.no_grad.get();
        self.no_grad.set(!create_graph);
        let mut g: Vec<Option<NodeId>> = vec![None; root.idx() + 1];
        let root_dim = self.nodes.borrow()[root.idx()].value.raw_dim();
        let seed = self.constant(ArrayD::from_elem(root_dim, T::one()));
        g[root.idx()] = Some(seed);
        for i in (0..=root.idx()).rev() {
            if !needed[i] {
                continue;
            }
            let rg = self.nodes.borrow()[i].requires_grad;
            if !rg {
                continue;
            }
            let Some(gout) = g[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let out_id = NodeId(i as u32);
            for (parent, contrib) in self.vjp_pruned(&op, out_id, gout, &needed) {
                let slot = &mut g[parent.idx()];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        self.no_grad.set(prev_no_grad);
        Grads { g }
    }

    /// Per-parent gradient contributions for one op application, built
    /// only toward parents marked `needed`.
    fn vjp_pruned(&self, op: &Op, out: NodeId, g: NodeId, needed: &[bool]) -> Vec<(NodeId, NodeId)> {
        let mut res: Vec<(NodeId, NodeId)> = Vec::with_capacity(2);
        macro_rules! give {
            ($p:expr, $e:expr) => {
                if needed[$p.idx()] {
                    let c = $e;
                    res.push(($p, c));
                }
            };
        }
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                give!(a, g);
                give!(b, g);
            }
            Op::Sub(a, b) => {
                give!(a, g);
                give!(b, self.neg(g));
            }
            Op::Mul(a, b) => {
                give!(a, self.mul(g, b));
                give!(b, self.mul(g, a));
            }
            Op::ScaleF64(a, c) => give!(a, self.scale(g, c)),
            Op::AddScalar(a) => give!(a, g),
            Op::Recip(a) => {
                // d(1/a) = -y^2 da
                give!(a, {
                    let y2 = self.mul(out, out);
                    self.neg(self.mul(g, y2))
                });
            }
            Op::Sqrt(a) => {
                give!(a, {
                    let half_inv = self.scale(self.recip(out), 0.5);
                    self.mul(g, half_inv)
                });
            }
            Op::Exp(a) => give!(a, self.mul(g, out)),
            Op::Ln(a) => give!(a, self.mul(g, self.recip(a))),
            Op::Tanh(a) => {
                give!(a, {
                    let y2 = self.mul(out, out);
                    let one_minus = self.add_scalar(self.neg(y2), 1.0);
                    self.mul(g, one_minus)
                });
            }
            Op::Relu(a) => {
                // mask is by-value; zero derivative almost everywhere
                give!(a, self.relu_bwd(a, g));
            }
            Op::ReluBwd(a, b) => {
                // d/da is zero a.e.; the mask passes the cotangent to g
                give!(b, self.relu_bwd(a, g));
            }
            Op::Gelu(a) => {
                give!(a, self.mul(g, self.gelu_deriv(a)));
            }
            Op::GeluDeriv(a) => {
                // second derivative of gelu, composed (only reached by
                // higher-order passes)
                give!(a, {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    let alpha = 0.044715;
                    let x2 = self.mul(a, a);
                    let u = self.scale(self.add(a, self.scale(self.mul(x2, a), alpha)), c);
                    let th = self.tanh(u);
                    let sech2 = self.add_scalar(self.neg(self.mul(th, th)), 1.0);
                    let du = self.scale(self.add_scalar(self.scale(x2, 3.0 * alpha), 1.0), c);
                    let ddu = self.scale(a, 6.0 * c * alpha);
                    let term1 = self.mul(sech2, du);
                    let du2 = self.mul(du, du);
                    let inner = self.sub(
                        self.mul(sech2, ddu),
                        self.scale(self.mul(th, self.mul(sech2, du2)), 2.0),
                    );
                    let term2 = self.mul(self.scale(a, 0.5), inner);
                    self.mul(g, self.add(term1, term2))
                });
            }
            Op::SoftmaxLast(a) => {
                give!(a, self.softmax_vjp(out, g));
            }
            Op::SoftmaxVjp(y, gin) => {
                // F = y*(g - rowsum(g*y)); self-adjoint in g, composed in y
                give!(gin, self.softmax_vjp(y, g));
                give!(y, {
                    let shape = self.shape(y);
                    let last = shape.len() - 1;
                    // flatten leading axes so the row ops apply
                    let rows: usize = shape[..last].iter().product();
                    let y2 = self.reshape(y, &[rows, shape[last]]);
                    let g2 = self.reshape(gin, &[rows, shape[last]]);
                    let u2 = self.reshape(g, &[rows, shape[last]]);
                    let s = self.row_dot(g2, y2);
                    let t = self.row_dot(u2, y2);
                    let zero = self.constant(ArrayD::zeros(IxDyn(&[rows])));
                    let first = self.mul(u2, self.sub(g2, self.mul_add_rows(g2, zero, s)));
                    // note: bc(s) built via mul_add_rows(g*0 + s) to reuse the row op
                    let second = self.mul_add_rows(g2, t, zero);
                    let flat = self.sub(first, second);
                    self.reshape(flat, &shape)
                });
            }
            Op::NormRows(a, eps) => {
                // dx = rstd * (g - mean(g) - y * mean(g*y))
                give!(a, {
                    let d = self.shape(a)[1];
                    let inv_d = 1.0 / d as f64;
                    let rstd = self.row_rstd(a, eps);
                    let mean_g = self.scale(self.sum_axis(g, 1), inv_d);
                    let mean_gy = self.scale(self.row_dot(g, out), inv_d);
                    self.row_combine(g, out, mean_g, mean_gy, rstd)
                });
            }
            Op::RowRstd(a, _eps) => {
                // d(rstd_i)/da = -rstd^3 * (a - mean_row) / D
                give!(a, {
                    let (m, d) = (self.shape(a)[0], self.shape(a)[1]);
                    let ones = self.constant(ArrayD::from_elem(IxDyn(&[m]), T::one()));
                    let zero = self.constant(ArrayD::zeros(IxDyn(&[m])));
                    let mean = self.scale(self.sum_axis(a, 1), 1.0 / d as f64);
                    // a - bc(mean) as one row op: a*1 + (-mean)
                    let xc = self.mul_add_rows(a, ones, self.neg(mean));
                    let r3 = self.mul(self.mul(out, out), out);
                    let coef = self.scale(self.mul(g, r3), -1.0 / d as f64);
                    self.mul_add_rows(xc, coef, zero)
                });
            }
            Op::RowDot(a, b) => {
                let zero = {
                    let m = self.shape(a)[0];
                    self.constant(ArrayD::zeros(IxDyn(&[m])))
                };
                give!(a, self.mul_add_rows(b, g, zero));
                give!(b, self.mul_add_rows(a, g, zero));
            }
            Op::RowCombine(gin, y, s1, s2, s3) => {
                give!(gin, {
                    let m = self.shape(gin)[0];
                    let zero = self.constant(ArrayD::zeros(IxDyn(&[m])));
                    self.mul_add_rows(g, s3, zero)
                });
                give!(y, {
                    let m = self.shape(y)[0];
                    let zero = self.constant(ArrayD::zeros(IxDyn(&[m])));
                    self.mul_add_rows(g, self.neg(self.mul(s2, s3)), zero)
                });
                give!(s1, self.neg(self.mul(self.sum_axis(g, 1), s3)));
                give!(s2, self.neg(self.mul(self.row_dot(g, y), s3)));
                give!(s3, {
                    let m = self.shape(gin)[0];
                    let ones = self.constant(ArrayD::from_elem(IxDyn(&[m]), T::one()));
                    let zeros = self.constant(ArrayD::zeros(IxDyn(&[m])));
                    let base = self.row_combine(gin, y, zeros, s2, ones);
                    // base = g - y*s2; still need the -s1 shift
                    let shifted = self.row_dot(g, base);
                    let corr = self.mul(self.sum_axis(g, 1), s1);
                    self.sub(shifted, corr)
                });
            }
            Op::Linear(x, w, b) => {
                give!(x, self.matmul(g, w));
                give!(w, self.matmul_tn(g, x));
                give!(b, self.sum_axis(g, 0));
            }
            Op::MulAddRows(a, s, t) => {
                give!(a, {
                    let m = self.shape(a)[0];
                    let zeros = self.constant(ArrayD::zeros(IxDyn(&[m])));
                    self.mul_add_rows(g, s, zeros)
                });
                give!(s, self.sum_axis(self.mul(g, a), 1));
                give!(t, self.sum_axis(g, 1));
            }
            Op::MulAddCols(a, s, t) => {
                give!(a, {
                    let d = self.shape(a)[1];
                    let zeros = self.constant(ArrayD::zeros(IxDyn(&[d])));
                    self.mul_add_cols(g, s, zeros)
                });
                give!(s, self.sum_axis(self.mul(g, a), 0));
                give!(t, self.sum_axis(g, 0));
            }
            Op::Matmul(a, b) => {
                give!(a, self.matmul_nt(g, b));
                give!(b, self.matmul_tn(a, g));
            }
            Op::MatmulTN(a, b) => {
                // out = a^T b; d/da = b g^T, d/db = a g
                give!(a, self.matmul_nt(b, g));
                give!(b, self.matmul(a, g));
            }
            Op::MatmulNT(a, b) => {
                // out = a b^T; d/da = g b, d/db = g^T a
                give!(a, self.matmul(g, b));
                give!(b, self.matmul_tn(g, a));
            }
            Op::Bmm(a, b) => {
                give!(a, {
                    let bt = self.permute(b, &[0, 2, 1]);
                    self.bmm(g, bt)
                });
                give!(b, {
                    let at = self.permute(a, &[0, 2, 1]);
                    self.bmm(at, g)
                });
            }
            Op::SumAxis(a, axis) => {
                give!(a, {
                    let n = self.shape(a)[axis];
                    self.broadcast_axis(g, axis, n)
                });
            }
            Op::SumAll(a) => {
                give!(a, {
                    let shape = self.shape(a);
                    self.broadcast_scalar(g, &shape)
                });
            }
            Op::BroadcastAxis(a, axis) => give!(a, self.sum_axis(g, axis)),
            Op::BroadcastScalar(a) => give!(a, self.sum_all(g)),
            Op::Reshape(a) => {
                give!(a, {
                    let shape = self.shape(a);
                    self.reshape(g, &shape)
                });
            }
            Op::Permute(a, ref axes) => {
                give!(a, {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    self.permute(g, &inv)
                });
            }
            Op::Concat(ref parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if needed[p.idx()] {
                        let piece = self.slice_axis(g, axis, offset, offset + len);
                        res.push((p, piece));
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start, end } => {
                give!(a, {
                    let orig = self.shape(a)[axis];
                    self.pad_zero(g, axis, start, orig - end)
                });
            }
            Op::PadZero { a, axis, before } => {
                give!(a, {
                    let orig = self.shape(a)[axis];
                    self.slice_axis(g, axis, before, before + orig)
                });
            }
            Op::Flip(a, axis) => give!(a, self.flip(g, axis)),
            Op::Conv2d { x, k, stride, pad } => {
                give!(x, {
                    let xs = self.shape(x);
                    self.conv2d_bwd_input(g, k, stride, pad, (xs[2], xs[3]))
                });
                give!(k, {
                    let ks = self.shape(k);
                    self.conv2d_bwd_kernel(x, g, stride, pad, (ks[2], ks[3]))
                });
            }
            Op::ConvBwdInput { g: g0, k, stride, pad } => {
                // out = adj_x(g0, k); <u, adj_x(g0,k)> = <conv(u,k), g0>
                give!(g0, self.conv2d(g, k, stride, pad));
                give!(k, {
                    let ks = self.shape(k);
                    self.conv2d_bwd_kernel(g, g0, stride, pad, (ks[2], ks[3]))
                });
            }
            Op::ConvBwdKernel { x, g: g0, stride, pad } => {
                // out = adj_k(x, g0); cotangent u is kernel-shaped
                give!(x, {
                    let xs = self.shape(x);
                    self.conv2d_bwd_input(g0, g, stride, pad, (xs[2], xs[3]))
                });
                give!(g0, self.conv2d(x, g, stride, pad));
            }
            Op::AvgPool(x, k) => {
                give!(x, {
                    let xs = self.shape(x);
                    self.avg_unpool2d(g, k, (xs[2], xs[3]))
                });
            }
            Op::AvgUnpool(g0, k) => give!(g0, self.avg_pool2d(g, k)),
            Op::Resize(x) => {
                give!(x, {
                    let xs = self.shape(x);
                    self.bilinear_resize_adj(g, (xs[2], xs[3]))
                });
            }
            Op::ResizeAdj(g0) => {
                give!(g0, {
                    let gs = self.shape(g0);
                    self.bilinear_resize(g, (gs[2], gs[3]))
                });
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn backward_reaches_leaves_through_composition() {
        let t = Tape::<f64>::new();
        let x = t.var(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.mul(x, x);
        let s = t.sum_all(y);
        let g = t.backward(s, false);
        let gx = t.value_owned(g.wrt(x).unwrap());
        assert_eq!(gx.as_slice().unwrap(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn constants_do_not_get_gradients() {
        let t = Tape::<f64>::new();
        let x = t.var(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let c = t.constant(ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let s = t.sum_all(t.mul(x, c));
        let g = t.backward(s, false);
        assert!(g.wrt(c).is_none());
        assert_eq!(
            t.value_owned(g.wrt(x).unwrap()).as_slice().unwrap(),
            &[5.0, 5.0, 5.0]
        );
    }

    #[test]
    fn grad_of_grad_matches_closed_form() {
        // f(x) = sum(x^3); df/dx = 3x^2; d(sum(df/dx))/dx = 6x.
        let t = Tape::<f64>::new();
        let x = t.var(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, -3.0]).unwrap());
        let x3 = t.mul(t.mul(x, x), x);
        let f = t.sum_all(x3);
        let g = t.backward(f, true);
        let gx = g.wrt(x).unwrap();
        let s = t.sum_all(gx);
        let g2 = t.backward(s, false);
        let gxx = t.value_owned(g2.wrt(x).unwrap());
        assert_eq!(gxx.as_slice().unwrap(), &[6.0, 12.0, -18.0]);
    }
}
