//! Neural-net math on top of the tape primitives. Every function here is
//! differentiable to any order supported by the primitives it uses
//! (numerical-stability max shifts are value-captured constants).

use crate::kernels::{contiguous_strides, gather_copy};
use crate::tape::{NodeId, Tape};
use crate::Scalar;
use ndarray::{ArrayD, Axis, IxDyn};

/// Repeat a reduced array along a new trailing axis of length `n`.
fn repeat_last<T: Scalar>(reduced: &ArrayD<T>, n: usize) -> ArrayD<T> {
    let src = reduced.as_slice().expect("reduced array is contiguous");
    let mut shape = reduced.shape().to_vec();
    shape.push(n);
    let mut strides = contiguous_strides(reduced.shape());
    strides.push(0);
    ArrayD::from_shape_vec(IxDyn(&shape), gather_copy(src, 0, &shape, &strides)).unwrap()
}

/// `x @ w.T + b` for `x: [M, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear<T: Scalar>(t: &Tape<T>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    t.linear(x, w, b)
}

/// Softmax along the last axis of an arbitrary-rank node.
pub fn softmax_last<T: Scalar>(t: &Tape<T>, x: NodeId) -> NodeId {
    t.softmax_last(x)
}

/// Log-softmax over the last axis of a 2-D `[N, K]` node.
pub fn log_softmax<T: Scalar>(t: &Tape<T>, logits: NodeId) -> NodeId {
    let shape = t.shape(logits);
    assert_eq!(shape.len(), 2, "log_softmax expects [N, K]");
    let k = shape[1];
    let shift = {
        let v = t.value(logits);
        let m = v.map_axis(Axis(1), |row| {
            row.iter().copied().fold(T::neg_infinity(), T::max)
        });
        repeat_last(&m, k)
    };
    let shift = t.constant(shift);
    let z = t.sub(logits, shift);
    let s = t.sum_axis(t.exp(z), 1);
    let lse = t.broadcast_axis(t.ln(s), 1, k);
    t.sub(z, lse)
}

/// Mean cross-entropy of `[N, K]` logits against integer labels.
pub fn cross_entropy_mean<T: Scalar>(t: &Tape<T>, logits: NodeId, labels: &[usize]) -> NodeId {
    let shape = t.shape(logits);
    let (n, k) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "label count mismatch");
    let mut onehot = ArrayD::<T>::zeros(IxDyn(&[n, k]));
    for (i, &lab) in labels.iter().enumerate() {
        assert!(lab < k, "label {lab} out of range for {k} classes");
        onehot[[i, lab]] = T::one();
    }
    let onehot = t.constant(onehot);
    let ls = log_softmax(t, logits);
    let picked = t.sum_all(t.mul(ls, onehot));
    t.scale(picked, -1.0 / n as f64)
}

/// Mean squared error over all entries of two same-shape nodes.
pub fn mse_mean<T: Scalar>(t: &Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let len: usize = t.shape(a).iter().product();
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    t.scale(t.sum_all(sq), 1.0 / len.max(1) as f64)
}

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(t: &Tape<T>, x: NodeId) -> NodeId {
    t.gelu(x)
}

/// Layer norm over the last axis of `[M, D]` with affine `gamma`, `beta: [D]`.
pub fn layer_norm<T: Scalar>(
    t: &Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> NodeId {
    let xn = t.norm_rows(x, eps);
    t.mul_add_cols(xn, gamma, beta)
}

/// Instance norm over spatial dims of `[N, C, H, W]` with per-channel affine.
pub fn instance_norm<T: Scalar>(
    t: &Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> NodeId {
    let shape = t.shape(x);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let x2 = t.reshape(x, &[n * c, h * w]);
    let xn = t.norm_rows(x2, eps);
    // expand the [C] affine params to one scalar per (n, c) row
    let expand = |p: NodeId| {
        let pr = t.broadcast_axis(p, 0, n); // [N, C]
        t.reshape(pr, &[n * c])
    };
    let y = t.mul_add_rows(xn, expand(gamma), expand(beta));
    t.reshape(y, &[n, c, h, w])
}
