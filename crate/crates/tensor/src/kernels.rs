//! Raw array kernels behind the tape ops: the conv2d triad, average
//! pooling, and bilinear resize, each paired with its adjoint.
//!
//! Convolution is im2col + gemm. The batch dimension is processed in
//! parallel; reductions over the batch (the kernel-gradient path) are
//! combined in fixed chunk order so results are bit-reproducible
//! regardless of thread count.

use crate::Scalar;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Row-chunked parallel gemm. Chunking only partitions output rows, so the
/// result is bitwise identical to a single `dot` call.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, k) = a.dim();
    let (_, n) = b.dim();
    if m * k * n < (1 << 18) || m < 8 {
        return a.dot(&b);
    }
    let chunk = m.div_ceil(4);
    let mut out = Array2::<T>::zeros((m, n));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut o, ac)| o.assign(&ac.dot(&b)));
    out
}

/// Row-major strides (in elements) for a contiguous array of `shape`.
pub fn contiguous_strides(shape: &[usize]) -> Vec<isize> {
    let mut strides = vec![1isize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1] as isize;
    }
    strides
}

/// Copy a strided view into a fresh contiguous buffer. `strides` are in
/// elements and follow the OUTPUT axis order; stride 0 repeats (broadcast),
/// negative strides walk backwards (flip). The innermost axis specializes
/// to memcpy when unit-stride.
pub fn gather_copy<T: Copy>(src: &[T], offset: isize, shape: &[usize], strides: &[isize]) -> Vec<T> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if shape.is_empty() {
        out.push(src[offset as usize]);
        return out;
    }
    let last = shape.len() - 1;
    let (inner_len, inner_stride) = (shape[last], strides[last]);
    let outer_dims = &shape[..last];
    let outer_strides = &strides[..last];
    let mut idx = vec![0usize; outer_dims.len()];
    let mut base = offset;
    loop {
        let start = base;
        if inner_stride == 1 {
            let s = start as usize;
            out.extend_from_slice(&src[s..s + inner_len]);
        } else if inner_stride == 0 {
            let v = src[start as usize];
            out.extend(std::iter::repeat(v).take(inner_len));
        } else {
            let mut p = start;
            for _ in 0..inner_len {
                out.push(src[p as usize]);
                p += inner_stride;
            }
        }
        // odometer over the outer axes
        let mut axis = outer_dims.len();
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += outer_strides[axis];
            if idx[axis] < outer_dims[axis] {
                break;
            }
            base -= outer_strides[axis] * outer_dims[axis] as isize;
            idx[axis] = 0;
        }
    }
}

/// Batched matmul over the leading axis, parallel across batch items.
pub fn bmm<T: Scalar>(a: ArrayView3<T>, b: ArrayView3<T>) -> Array3<T> {
    let (bn, m, _k) = a.dim();
    let (bn2, _k2, p) = b.dim();
    assert_eq!(bn, bn2, "bmm batch mismatch");
    let mut out = Array3::<T>::zeros((bn, m, p));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(a.axis_iter(Axis(0)))
        .and(b.axis_iter(Axis(0)))
        .par_for_each(|mut o, ai, bi| o.assign(&ai.dot(&bi)));
    out
}

fn im2col<T: Scalar>(
    x: &[T], // one image, C*H*W contiguous
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    cols: &mut Array2<T>, // [C*kh*kw, ho*wo]
) {
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let cols_s = cols.as_slice_mut().expect("cols contiguous");
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * ho * wo;
                for i in 0..ho {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    let out_base = base + i * wo;
                    if ih < 0 || ih >= h as isize {
                        cols_s[out_base..out_base + wo].fill(T::zero());
                        continue;
                    }
                    let in_base = (c * h + ih as usize) * w;
                    for j in 0..wo {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        cols_s[out_base + j] = if iw >= 0 && iw < w as isize {
                            x[in_base + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &Array2<T>, // [C*kh*kw, ho*wo]
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    x: &mut [T], // one image, C*H*W, accumulated into
) {
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let cols_s = cols.as_slice().expect("cols contiguous");
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * ho * wo;
                for i in 0..ho {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_base = (c * h + ih as usize) * w;
                    for j in 0..wo {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            x[in_base + iw as usize] =
                                x[in_base + iw as usize] + cols_s[base + i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n,o,i,j] = sum_{c,ki,kj} x[n,c,i*s+ki-p,j*s+kj-p] * k[o,c,ki,kj]`
pub fn conv2d<T: Scalar>(x: ArrayView4<T>, k: ArrayView4<T>, stride: usize, pad: usize) -> Array4<T> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, kc, kh, kw) = k.dim();
    assert_eq!(c_in, kc, "conv2d channel mismatch");
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let k2 = k.into_shape_with_order((c_out, kc * kh * kw)).unwrap();
    let mut out = Array4::<T>::zeros((n, c_out, ho, wo));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut o, xi| {
            let mut cols = Array2::<T>::zeros((kc * kh * kw, ho * wo));
            let xs = xi.to_slice().expect("x contiguous");
            im2col(xs, (c_in, h, w), (kh, kw), stride, pad, &mut cols);
            let prod = k2.dot(&cols); // [c_out, ho*wo]
            o.assign(&prod.into_shape_with_order((c_out, ho, wo)).unwrap());
        });
    out
}

/// Adjoint of [`conv2d`] in its input argument: scatters `g` back through the kernel.
pub fn conv2d_bwd_input<T: Scalar>(
    g: ArrayView4<T>, // [N, c_out, ho, wo]
    k: ArrayView4<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<T> {
    let (n, c_out, ho, wo) = g.dim();
    let (kc_out, c_in, kh, kw) = k.dim();
    assert_eq!(c_out, kc_out, "conv2d_bwd_input channel mismatch");
    let (h, w) = in_hw;
    let k2 = k.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
    let k2t = k2.t().as_standard_layout().to_owned();
    let mut out = Array4::<T>::zeros((n, c_in, h, w));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(g.axis_iter(Axis(0)))
        .par_for_each(|mut xo, gi| {
            let g2 = gi.into_shape_with_order((c_out, ho * wo)).unwrap();
            let cols = k2t.dot(&g2); // [c_in*kh*kw, ho*wo]
            let xs = xo.as_slice_mut().expect("out contiguous");
            col2im(&cols, (c_in, h, w), (kh, kw), stride, pad, xs);
        });
    out
}

/// Adjoint of [`conv2d`] in its kernel argument.
pub fn conv2d_bwd_kernel<T: Scalar>(
    x: ArrayView4<T>,
    g: ArrayView4<T>, // [N, c_out, ho, wo]
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Array4<T> {
    let (n, c_in, h, w) = x.dim();
    let (gn, c_out, ho, wo) = g.dim();
    assert_eq!(n, gn, "conv2d_bwd_kernel batch mismatch");
    let (kh, kw) = k_hw;
    // Fixed chunking keeps the reduction order independent of thread count.
    let nchunks = n.min(8).max(1);
    let chunk = n.div_ceil(nchunks);
    let partials: Vec<Array2<T>> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(n);
            let mut acc = Array2::<T>::zeros((c_out, c_in * kh * kw));
            let mut cols = Array2::<T>::zeros((c_in * kh * kw, ho * wo));
            for i in lo..hi {
                let xi = x.index_axis(Axis(0), i);
                let xs = xi.to_slice().expect("x contiguous");
                im2col(xs, (c_in, h, w), (kh, kw), stride, pad, &mut cols);
                let g2 = g
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                acc = acc + g2.dot(&cols.t());
            }
            acc
        })
        .collect();
    let mut total = Array2::<T>::zeros((c_out, c_in * kh * kw));
    for p in partials {
        total = total + p;
    }
    total.into_shape_with_order((c_out, c_in, kh, kw)).unwrap()
}

/// Non-overlapping average pooling with window = stride = `k` (floor semantics:
/// trailing rows/columns that do not fill a window are dropped).
pub fn avg_pool2d<T: Scalar>(x: ArrayView4<T>, k: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / k, w / k);
    let inv = crate::lit::<T>(1.0 / (k * k) as f64);
    let src = x.to_slice().expect("pool input contiguous");
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = T::zero();
                for di in 0..k {
                    let row = base + (i * k + di) * w + j * k;
                    for dj in 0..k {
                        acc = acc + src[row + dj];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Array4::from_shape_vec((n, c, ho, wo), out).unwrap()
}

/// Adjoint of [`avg_pool2d`]: spreads `g/k^2` over each window; dropped cells get zero.
pub fn avg_unpool2d<T: Scalar>(g: ArrayView4<T>, k: usize, in_hw: (usize, usize)) -> Array4<T> {
    let (n, c, ho, wo) = g.dim();
    let (h, w) = in_hw;
    let inv = crate::lit::<T>(1.0 / (k * k) as f64);
    let src = g.to_slice().expect("unpool input contiguous");
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        let gbase = plane * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let gv = src[gbase + i * wo + j] * inv;
                for di in 0..k {
                    let row = base + (i * k + di) * w + j * k;
                    for slot in &mut out[row..row + k] {
                        *slot = *slot + gv;
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).unwrap()
}

/// Interpolation weights for one axis, `align_corners = false` convention
/// with edge clamping: `src = (dst + 0.5) * in/out - 0.5`.
fn bilinear_axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Bilinear resize of NCHW maps to `out_hw`.
pub fn bilinear_resize<T: Scalar>(x: ArrayView4<T>, out_hw: (usize, usize)) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = out_hw;
    let wy = bilinear_axis_weights(h, oh);
    let wx = bilinear_axis_weights(w, ow);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for (i, &(y0, y1, wy0, wy1)) in wy.iter().enumerate() {
                for (j, &(x0, x1, wx0, wx1)) in wx.iter().enumerate() {
                    let v = plane[[y0, x0]] * crate::lit(wy0 * wx0)
                        + plane[[y0, x1]] * crate::lit(wy0 * wx1)
                        + plane[[y1, x0]] * crate::lit(wy1 * wx0)
                        + plane[[y1, x1]] * crate::lit(wy1 * wx1);
                    out[[ni, ci, i, j]] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatter-add with the same weights.
pub fn bilinear_resize_adj<T: Scalar>(g: ArrayView4<T>, in_hw: (usize, usize)) -> Array4<T> {
    let (n, c, oh, ow) = g.dim();
    let (h, w) = in_hw;
    let wy = bilinear_axis_weights(h, oh);
    let wx = bilinear_axis_weights(w, ow);
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = out.slice_mut(s![ni, ci, .., ..]);
            let gp = g.slice(s![ni, ci, .., ..]);
            for (i, &(y0, y1, wy0, wy1)) in wy.iter().enumerate() {
                for (j, &(x0, x1, wx0, wx1)) in wx.iter().enumerate() {
                    let gv = gp[[i, j]];
                    plane[[y0, x0]] = plane[[y0, x0]] + gv * crate::lit(wy0 * wx0);
                    plane[[y0, x1]] = plane[[y0, x1]] + gv * crate::lit(wy0 * wx1);
                    plane[[y1, x0]] = plane[[y1, x0]] + gv * crate::lit(wy1 * wx0);
                    plane[[y1, x1]] = plane[[y1, x1]] + gv * crate::lit(wy1 * wx1);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn seq4(shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(shape, (0..len).map(|i| i as f64 * 0.1 - 3.0).collect()).unwrap()
    }

    #[test]
    fn conv2d_matches_naive() {
        let x = seq4((2, 3, 5, 6));
        let k = seq4((4, 3, 3, 3));
        for &(s, p) in &[(1usize, 1usize), (2, 0), (1, 0), (2, 1)] {
            let got = conv2d(x.view(), k.view(), s, p);
            let (ho, wo) = (conv_out_len(5, 3, s, p), conv_out_len(6, 3, s, p));
            for n in 0..2 {
                for o in 0..4 {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let ih = (i * s + ki) as isize - p as isize;
                                        let iw = (j * s + kj) as isize - p as isize;
                                        if ih >= 0 && ih < 5 && iw >= 0 && iw < 6 {
                                            acc += x[[n, c, ih as usize, iw as usize]]
                                                * k[[o, c, ki, kj]];
                                        }
                                    }
                                }
                            }
                            assert!((got[[n, o, i, j]] - acc).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    /// The two adjoints must satisfy <conv(x,k), g> == <x, bwd_input(g,k)> == <k, bwd_kernel(x,g)>.
    #[test]
    fn conv2d_adjoint_identities() {
        let x = seq4((2, 3, 6, 5));
        let k = seq4((4, 3, 3, 3));
        for &(s, p) in &[(1usize, 1usize), (2, 1), (2, 0)] {
            let y = conv2d(x.view(), k.view(), s, p);
            let g = y.mapv(|v| (v * 0.37).sin()); // arbitrary cotangent
            let lhs: f64 = (&y * &g).sum();
            let gx = conv2d_bwd_input(g.view(), k.view(), s, p, (6, 5));
            let rhs_x: f64 = (&x * &gx).sum();
            assert!((lhs - rhs_x).abs() < 1e-8 * lhs.abs().max(1.0));
            let gk = conv2d_bwd_kernel(x.view(), g.view(), s, p, (3, 3));
            let rhs_k: f64 = (&k * &gk).sum();
            assert!((lhs - rhs_k).abs() < 1e-8 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn avg_pool_floor_drops_remainder() {
        let x = seq4((1, 2, 7, 7));
        let y = avg_pool2d(x.view(), 2);
        assert_eq!(y.dim(), (1, 2, 3, 3));
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                want += x[[0, 1, 4 + i, 2 + j]];
            }
        }
        assert!((y[[0, 1, 2, 1]] - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn pool_and_resize_adjoint_identities() {
        let x = seq4((2, 3, 7, 6));
        let y = avg_pool2d(x.view(), 2);
        let g = y.mapv(|v| v.cos());
        let lhs: f64 = (&y * &g).sum();
        let gx = avg_unpool2d(g.view(), 2, (7, 6));
        let rhs: f64 = (&x * &gx).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        let r = bilinear_resize(x.view(), (5, 9));
        let gr = r.mapv(|v| (v * 0.7).sin());
        let lhs_r: f64 = (&r * &gr).sum();
        let gxr = bilinear_resize_adj(gr.view(), (7, 6));
        let rhs_r: f64 = (&x * &gxr).sum();
        assert!((lhs_r - rhs_r).abs() < 1e-10 * lhs_r.abs().max(1.0));
    }

    #[test]
    fn bilinear_center_of_2x2_to_3x3_is_four_neighbor_average() {
        let x = Array4::<f64>::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 5.0, 10.0]).unwrap();
        let y = bilinear_resize(x.view(), (3, 3));
        assert!((y[[0, 0, 1, 1]] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Array4::from_elem((1, 2, 3, 4), 0.7);
        for &hw in &[(2, 2), (5, 7), (3, 4), (8, 2)] {
            let y = bilinear_resize(x.view(), hw);
            assert!(y.iter().all(|&v| (v - 0.7f64).abs() < 1e-12));
        }
    }
}
