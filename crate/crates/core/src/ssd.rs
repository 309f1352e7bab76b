//! Spatial-Semantic Decomposition and the mutual-distillation loss.
//!
//! Features from each model split into a semantic part (CLS token for the
//! transformer, spatially mean-pooled vector for the CNN) and a spatial
//! part. Spatial maps are bilinearly resized to a shared grid, the semantic
//! token is concatenated in front, a per-layer learnable affine maps every
//! token to a shared dimension, and a learnable layer-matching matrix
//! contracts the deeper model's layers down to the shallower one's count.
//! The mutual-distillation loss is the MSE between the two matched stacks.

use crate::error::{HmdcError, Result};
use crate::models::{FeatureStack, ModelSpec, Param, TapDim};
use hmdc_tensor::compose::{mse_mean, softmax_last};
use hmdc_tensor::{lit, NodeId, Scalar, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Shared token grid / dimension both models are mapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetDims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl TargetDims {
    /// Smaller-of-the-two rule: minimum usable grid (floored at 2x2) and
    /// minimum feature dimension across both models' taps.
    pub fn for_pair(taps1: &[TapDim], taps2: &[TapDim]) -> TargetDims {
        let min_grid = |taps: &[TapDim]| {
            taps.iter()
                .fold((usize::MAX, usize::MAX), |(h, w), t| (h.min(t.h), w.min(t.w)))
        };
        let (h1, w1) = min_grid(taps1);
        let (h2, w2) = min_grid(taps2);
        let min_dim = |taps: &[TapDim]| taps.iter().map(|t| t.dim).min().unwrap_or(1);
        TargetDims {
            h: h1.min(h2).max(2),
            w: w1.min(w2).max(2),
            d: min_dim(taps1).min(min_dim(taps2)),
        }
    }

    pub fn tokens(&self) -> usize {
        self.w * self.h + 1
    }
}

/// Per-layer features split into semantic `[N, 1, d_l]` and spatial
/// `[N, d_l, h_l, w_l]` parts.
pub struct DecomposedFeatures {
    pub semantic: Vec<NodeId>,
    pub spatial: Vec<NodeId>,
}

impl DecomposedFeatures {
    pub fn layer_count(&self) -> usize {
        self.semantic.len()
    }
}

/// Split a transformer token stack: token 0 is semantic, the rest reshape
/// row-major onto the patch grid.
pub fn decompose_vit_features<T: Scalar>(
    tape: &Tape<T>,
    layers: &[NodeId],
    grid: (usize, usize),
) -> Result<DecomposedFeatures> {
    let (gh, gw) = grid;
    let mut semantic = Vec::with_capacity(layers.len());
    let mut spatial = Vec::with_capacity(layers.len());
    for &layer in layers {
        let s = tape.shape(layer); // [N, T, D]
        if s.len() != 3 || s[1] != gh * gw + 1 {
            return Err(HmdcError::Shape(format!(
                "token stack {s:?} does not match grid {gh}x{gw}+1"
            )));
        }
        let (n, d) = (s[0], s[2]);
        semantic.push(tape.slice_axis(layer, 1, 0, 1));
        let tokens = tape.slice_axis(layer, 1, 1, s[1]); // [N, gh*gw, D]
        let grid4 = tape.reshape(tokens, &[n, gh, gw, d]);
        spatial.push(tape.permute(grid4, &[0, 3, 1, 2])); // [N, D, gh, gw]
    }
    Ok(DecomposedFeatures { semantic, spatial })
}

/// Split CNN channel maps: semantic is the spatial mean per channel, the
/// raw map is the spatial part.
pub fn decompose_cnn_features<T: Scalar>(
    tape: &Tape<T>,
    layers: &[NodeId],
) -> Result<DecomposedFeatures> {
    let mut semantic = Vec::with_capacity(layers.len());
    let mut spatial = Vec::with_capacity(layers.len());
    for &layer in layers {
        let s = tape.shape(layer); // [N, C, H, W]
        if s.len() != 4 {
            return Err(HmdcError::Shape(format!("channel map must be 4-d, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pooled = tape.scale(
            tape.sum_axis(tape.sum_axis(layer, 3), 2),
            1.0 / (h * w) as f64,
        ); // [N, C]
        semantic.push(tape.reshape(pooled, &[n, 1, c]));
        spatial.push(layer);
    }
    Ok(DecomposedFeatures { semantic, spatial })
}

pub fn decompose<T: Scalar>(tape: &Tape<T>, stack: &FeatureStack) -> Result<DecomposedFeatures> {
    match stack {
        FeatureStack::TokenGrid { layers, grid } => decompose_vit_features(tape, layers, *grid),
        FeatureStack::ChannelMap { layers } => decompose_cnn_features(tape, layers),
    }
}

/// Learnable alignment state: per-model, per-layer affines plus the
/// layer-matching matrix (consumed only through its softmax).
pub struct AlignmentHead<T: Scalar> {
    /// `affine[m][l] = (W, b)` with `W: [d, d_src]`, `b: [d]`.
    pub affine: [Vec<(ArrayD<T>, ArrayD<T>)>; 2],
    /// `[n, m]` where `n` is model 1's layer count, `m` model 2's.
    pub m_layer: ArrayD<T>,
    pub target: TargetDims,
}

pub struct StagedHead {
    pub affine: [Vec<(NodeId, NodeId)>; 2],
    pub m_layer: NodeId,
}

impl<T: Scalar> AlignmentHead<T> {
    /// Affines start as small uniform noise scaled by `1/sqrt(d_src)`,
    /// biases at zero, the matching matrix at zero (uniform softmax).
    pub fn build(spec1: &ModelSpec, spec2: &ModelSpec, rng: &mut impl Rng) -> Self {
        let taps1 = spec1.tap_dims();
        let taps2 = spec2.tap_dims();
        let target = TargetDims::for_pair(&taps1, &taps2);
        let mut affine = [Vec::new(), Vec::new()];
        for (slot, taps) in [(0usize, &taps1), (1, &taps2)] {
            for tap in taps.iter() {
                let bound = 1.0 / (tap.dim as f64).sqrt();
                let n = target.d * tap.dim;
                let data: Vec<T> = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
                let w = ArrayD::from_shape_vec(IxDyn(&[target.d, tap.dim]), data).unwrap();
                let b = ArrayD::zeros(IxDyn(&[target.d]));
                affine[slot].push((w, b));
            }
        }
        let m_layer = ArrayD::zeros(IxDyn(&[taps1.len(), taps2.len()]));
        AlignmentHead {
            affine,
            m_layer,
            target,
        }
    }

    /// Checkpoint-ready named views of all head parameters.
    pub fn named_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for (m, layers) in self.affine.iter().enumerate() {
            for (l, (w, b)) in layers.iter().enumerate() {
                out.push(Param {
                    name: format!("affine.{}.{}.W", m + 1, l),
                    value: w.clone(),
                });
                out.push(Param {
                    name: format!("affine.{}.{}.b", m + 1, l),
                    value: b.clone(),
                });
            }
        }
        out.push(Param {
            name: "m_layer".into(),
            value: self.m_layer.clone(),
        });
        out
    }

    pub fn stage(&self, tape: &Tape<T>, trainable: bool) -> StagedHead {
        let leaf = |v: &ArrayD<T>| {
            if trainable {
                tape.var(v.clone())
            } else {
                tape.constant(v.clone())
            }
        };
        StagedHead {
            affine: [
                self.affine[0].iter().map(|(w, b)| (leaf(w), leaf(b))).collect(),
                self.affine[1].iter().map(|(w, b)| (leaf(w), leaf(b))).collect(),
            ],
            m_layer: leaf(&self.m_layer),
        }
    }
}

/// Interpolate spatial maps to the target grid, prepend the semantic token,
/// apply that layer's affine, and stack layers on the trailing axis.
/// Returns `[N, w*h+1, d, L]`.
pub fn align_features<T: Scalar>(
    tape: &Tape<T>,
    dec: &DecomposedFeatures,
    head: &StagedHead,
    model_index: usize,
    target: TargetDims,
) -> Result<NodeId> {
    let affines = &head.affine[model_index];
    if affines.len() != dec.layer_count() {
        return Err(HmdcError::Shape(format!(
            "alignment head has {} layers, features have {}",
            affines.len(),
            dec.layer_count()
        )));
    }
    let tokens = target.tokens();
    let mut per_layer = Vec::with_capacity(dec.layer_count());
    for (l, (&sem, &spa)) in dec.semantic.iter().zip(&dec.spatial).enumerate() {
        let (w_node, b_node) = affines[l];
        let sshape = tape.shape(spa); // [N, C, h_l, w_l]
        let (n, c) = (sshape[0], sshape[1]);
        let wshape = tape.shape(w_node);
        if wshape[1] != c {
            return Err(HmdcError::Shape(format!(
                "affine layer {l} expects source dim {}, features have {c}",
                wshape[1]
            )));
        }
        let resized = tape.bilinear_resize(spa, (target.h, target.w)); // [N, C, h, w]
        let grid_tokens = tape.permute(resized, &[0, 2, 3, 1]); // [N, h, w, C]
        let grid_tokens = tape.reshape(grid_tokens, &[n, target.h * target.w, c]);
        let cat = tape.concat(&[sem, grid_tokens], 1); // [N, tokens, C]
        let flat = tape.reshape(cat, &[n * tokens, c]);
        let wt = tape.permute(w_node, &[1, 0]);
        let projected = tape.matmul(flat, wt); // [N*tokens, d]
        let bb = tape.broadcast_axis(b_node, 0, n * tokens);
        let projected = tape.add(projected, bb);
        let shaped = tape.reshape(projected, &[n, tokens, target.d, 1]);
        per_layer.push(shaped);
    }
    Ok(tape.concat(&per_layer, 3)) // [N, tokens, d, L]
}

/// Softmax over the first axis of a 2-D node (each column sums to one).
fn softmax_axis0<T: Scalar>(tape: &Tape<T>, m: NodeId) -> NodeId {
    let mt = tape.permute(m, &[1, 0]);
    let sm = softmax_last(tape, mt);
    tape.permute(sm, &[1, 0])
}

/// Contract the deeper stack's layer axis down to the shallower count with
/// a convex (softmax) combination. Returns matched `(f1, f2)`, both
/// `[N, tokens, d, min(n, m)]`.
pub fn match_layers<T: Scalar>(
    tape: &Tape<T>,
    f1: NodeId,
    f2: NodeId,
    m_layer: NodeId,
) -> Result<(NodeId, NodeId)> {
    let s1 = tape.shape(f1);
    let s2 = tape.shape(f2);
    let (n_layers, m_layers) = (s1[3], s2[3]);
    let ms = tape.shape(m_layer);
    if ms != vec![n_layers, m_layers] {
        return Err(HmdcError::Shape(format!(
            "m_layer {ms:?} does not match layer counts ({n_layers}, {m_layers})"
        )));
    }
    let contract = |f: NodeId, weights: NodeId| {
        let s = tape.shape(f);
        let flat = tape.reshape(f, &[s[0] * s[1] * s[2], s[3]]);
        let mixed = tape.matmul(flat, weights);
        let out_layers = tape.shape(weights)[1];
        tape.reshape(mixed, &[s[0], s[1], s[2], out_layers])
    };
    if m_layers > n_layers {
        // contract f2 with softmax(M^T): [m, n], convex over the m source layers
        let weights = softmax_axis0(tape, tape.permute(m_layer, &[1, 0]));
        Ok((f1, contract(f2, weights)))
    } else {
        // contract f1 with softmax(M): [n, m], convex over the n source layers
        let weights = softmax_axis0(tape, m_layer);
        Ok((contract(f1, weights), f2))
    }
}

/// MSE over all entries of the two matched stacks.
pub fn mutual_distillation_loss<T: Scalar>(
    tape: &Tape<T>,
    matched1: NodeId,
    matched2: NodeId,
) -> Result<NodeId> {
    if tape.shape(matched1) != tape.shape(matched2) {
        return Err(HmdcError::Shape("matched feature shapes differ".into()));
    }
    Ok(mse_mean(tape, matched1, matched2))
}

/// Full pipeline from two feature stacks to the scalar L_MD.
pub fn md_loss_from_stacks<T: Scalar>(
    tape: &Tape<T>,
    stack1: &FeatureStack,
    stack2: &FeatureStack,
    head: &StagedHead,
    target: TargetDims,
) -> Result<NodeId> {
    let d1 = decompose(tape, stack1)?;
    let d2 = decompose(tape, stack2)?;
    let f1 = align_features(tape, &d1, head, 0, target)?;
    let f2 = align_features(tape, &d2, head, 1, target)?;
    let (m1, m2) = match_layers(tape, f1, f2, head.m_layer)?;
    mutual_distillation_loss(tape, m1, m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], f: impl Fn(usize) -> f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn vit_semantic_is_token_zero_and_spatial_roundtrips() {
        let t = Tape::<f64>::new();
        let layer = t.var(arr(&[2, 10, 6], |i| i as f64 * 0.5));
        let dec = decompose_vit_features(&t, &[layer], (3, 3)).unwrap();
        let sem = t.value_owned(dec.semantic[0]);
        let src = t.value_owned(layer);
        for n in 0..2 {
            for d in 0..6 {
                assert_eq!(sem[[n, 0, d]], src[[n, 0, d]]);
            }
        }
        // spatial reshape against a brute-force index map: token 1+gi*3+gj
        let spa = t.value_owned(dec.spatial[0]);
        for n in 0..2 {
            for d in 0..6 {
                for gi in 0..3 {
                    for gj in 0..3 {
                        assert_eq!(spa[[n, d, gi, gj]], src[[n, 1 + gi * 3 + gj, d]]);
                    }
                }
            }
        }
    }

    #[test]
    fn vit_rejects_bad_token_count() {
        let t = Tape::<f64>::new();
        let layer = t.var(arr(&[1, 9, 4], |i| i as f64));
        assert!(decompose_vit_features(&t, &[layer], (3, 3)).is_err());
    }

    #[test]
    fn cnn_semantic_is_spatial_mean() {
        let t = Tape::<f64>::new();
        let layer = t.var(arr(&[1, 8, 4, 4], |i| (i as f64 * 0.37).sin()));
        let dec = decompose_cnn_features(&t, &[layer]).unwrap();
        assert_eq!(t.shape(dec.semantic[0]), vec![1, 1, 8]);
        let sem = t.value_owned(dec.semantic[0]);
        let src = t.value_owned(layer);
        for c in 0..8 {
            let mut sum = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    sum += src[[0, c, i, j]];
                }
            }
            assert!((sem[[0, 0, c]] - sum / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cnn_constant_map_gives_constant_semantic() {
        let t = Tape::<f64>::new();
        let layer = t.var(ArrayD::from_elem(IxDyn(&[2, 3, 5, 5]), 0.25));
        let dec = decompose_cnn_features(&t, &[layer]).unwrap();
        let sem = t.value_owned(dec.semantic[0]);
        assert!(sem.iter().all(|&v| (v - 0.25f64).abs() < 1e-12));
    }

    #[test]
    fn identity_affine_on_matching_grid_is_concatenation() {
        let t = Tape::<f64>::new();
        let target = TargetDims { w: 2, h: 2, d: 3 };
        let sem = t.var(arr(&[1, 1, 3], |i| i as f64 + 1.0));
        let spa = t.var(arr(&[1, 3, 2, 2], |i| i as f64 * 10.0));
        let dec = DecomposedFeatures {
            semantic: vec![sem],
            spatial: vec![spa],
        };
        let mut eye = ArrayD::<f64>::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            eye[[i, i]] = 1.0;
        }
        let head = StagedHead {
            affine: [vec![(t.constant(eye), t.constant(ArrayD::zeros(IxDyn(&[3]))))], vec![]],
            m_layer: t.constant(ArrayD::zeros(IxDyn(&[1, 1]))),
        };
        let out = align_features(&t, &dec, &head, 0, target).unwrap();
        assert_eq!(t.shape(out), vec![1, 5, 3, 1]);
        let v = t.value_owned(out);
        let sem_v = t.value_owned(dec.semantic[0]);
        let spa_v = t.value_owned(dec.spatial[0]);
        for d in 0..3 {
            assert_eq!(v[[0, 0, d, 0]], sem_v[[0, 0, d]]);
            // token order is row-major over the grid
            for gi in 0..2 {
                for gj in 0..2 {
                    assert_eq!(v[[0, 1 + gi * 2 + gj, d, 0]], spa_v[[0, d, gi, gj]]);
                }
            }
        }
    }

    #[test]
    fn zero_m_layer_averages_source_layers() {
        let t = Tape::<f64>::new();
        let f1 = t.var(arr(&[1, 2, 2, 4], |i| i as f64));
        let f2 = t.var(arr(&[1, 2, 2, 2], |i| i as f64 * 3.0));
        let m = t.var(ArrayD::zeros(IxDyn(&[4, 2])));
        let (m1, m2) = match_layers(&t, f1, f2, m).unwrap();
        assert_eq!(t.shape(m1), vec![1, 2, 2, 2]);
        assert_eq!(t.shape(m2), vec![1, 2, 2, 2]);
        let v1 = t.value_owned(m1);
        let src = t.value_owned(f1);
        for tok in 0..2 {
            for d in 0..2 {
                let avg = (0..4).map(|l| src[[0, tok, d, l]]).sum::<f64>() / 4.0;
                assert!((v1[[0, tok, d, 0]] - avg).abs() < 1e-12);
                assert!((v1[[0, tok, d, 1]] - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strong_diagonal_m_layer_selects_layers() {
        let t = Tape::<f64>::new();
        let f1 = t.var(arr(&[1, 3, 2, 3], |i| (i as f64 * 0.11).cos()));
        let f2 = t.var(arr(&[1, 3, 2, 3], |i| (i as f64 * 0.07).sin()));
        let mut m = ArrayD::<f64>::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            m[[i, i]] = 20.0;
        }
        let (m1, _) = match_layers(&t, f1, f2, t.var(m)).unwrap();
        let got = t.value_owned(m1);
        let src = t.value_owned(f1);
        for tok in 0..3 {
            for d in 0..2 {
                for l in 0..3 {
                    assert!(
                        (got[[0, tok, d, l]] - src[[0, tok, d, l]]).abs() < 1e-6,
                        "softmax(20*I) should be near-exact layer selection"
                    );
                }
            }
        }
    }

    #[test]
    fn md_loss_identities() {
        let t = Tape::<f64>::new();
        let a = t.var(arr(&[2, 3, 2, 2], |i| i as f64 * 0.2));
        let same = t.var(arr(&[2, 3, 2, 2], |i| i as f64 * 0.2));
        let zero = mutual_distillation_loss(&t, a, same).unwrap();
        assert_eq!(t.scalar(zero), 0.0);
        let shifted = t.add_scalar(a, 1.5);
        let l = mutual_distillation_loss(&t, a, shifted).unwrap();
        assert!((t.scalar(l) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn random_md_loss_matches_elementwise_oracle() {
        let t = Tape::<f64>::new();
        let a = t.var(arr(&[3, 2, 2, 1], |i| (i as f64 * 0.77).sin()));
        let b = t.var(arr(&[3, 2, 2, 1], |i| (i as f64 * 0.33).cos()));
        let l = mutual_distillation_loss(&t, a, b).unwrap();
        let (va, vb) = (t.value_owned(a), t.value_owned(b));
        let mut acc = 0.0;
        for (x, y) in va.iter().zip(vb.iter()) {
            acc += (x - y) * (x - y);
        }
        assert!((t.scalar(l) - acc / 12.0).abs() < 1e-7);
    }
}
