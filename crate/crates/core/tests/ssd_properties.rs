//! Structural properties of the spatial-semantic alignment path: the
//! matched-shape law, convexity of consumed layer weights, and exact
//! invariance under paired permutation of source layers.

use hmdc_core::config::ModelSpecConfig;
use hmdc_core::models::{build_model, ModelHandle, ModelSpec};
use hmdc_core::ssd::{align_features, decompose, match_layers, AlignmentHead, TargetDims};
use hmdc_tensor::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matched_shapes(
    spec1: &ModelSpec,
    spec2: &ModelSpec,
    batch: usize,
) -> (Vec<usize>, Vec<usize>, TargetDims) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m1: ModelHandle<f32> = build_model(spec1, &mut rng).unwrap();
    let m2: ModelHandle<f32> = build_model(spec2, &mut rng).unwrap();
    let head = AlignmentHead::build(spec1, spec2, &mut rng);
    let tape = Tape::<f32>::new();
    let s1 = m1.stage(&tape, false);
    let s2 = m2.stage(&tape, false);
    let sh = head.stage(&tape, false);
    let (c, h, w) = spec1.image_shape;
    let x = tape.constant(ArrayD::from_shape_fn(IxDyn(&[batch, c, h, w]), |ix| {
        (ix[3] as f32 * 0.31 + ix[2] as f32 * 0.17).sin()
    }));
    let (_, f1) = m1.forward_with_features(&tape, &s1, x).unwrap();
    let (_, f2) = m2.forward_with_features(&tape, &s2, x).unwrap();
    let d1 = decompose(&tape, &f1).unwrap();
    let d2 = decompose(&tape, &f2).unwrap();
    let a1 = align_features(&tape, &d1, &sh, 0, head.target).unwrap();
    let a2 = align_features(&tape, &d2, &sh, 1, head.target).unwrap();
    let (m1f, m2f) = match_layers(&tape, a1, a2, sh.m_layer).unwrap();
    (tape.shape(m1f), tape.shape(m2f), head.target)
}

/// Matched outputs share the shape `[(w*h+1), d, min(n, m)]` for every pair
/// in the zoo, over both supported image sizes.
#[test]
fn shape_law_over_model_pairs_and_sizes() {
    let archs = [
        ModelSpecConfig::Convnet { width: 8, depth: 3 },
        ModelSpecConfig::Convnet { width: 12, depth: 2 },
        ModelSpecConfig::Tinyvit { patch: 4, dim: 16, depth: 4, heads: 2 },
        ModelSpecConfig::Tinyvit { patch: 4, dim: 8, depth: 2, heads: 2 },
    ];
    for size in [28usize, 32] {
        for (i, a1) in archs.iter().enumerate() {
            for a2 in archs.iter().skip(i) {
                let spec1 = ModelSpec::new(a1.clone(), 10, (1, size, size)).unwrap();
                let spec2 = ModelSpec::new(a2.clone(), 10, (1, size, size)).unwrap();
                let (sh1, sh2, target) = matched_shapes(&spec1, &spec2, 2);
                assert_eq!(sh1, sh2, "{a1:?} vs {a2:?} at {size}");
                let n = spec1.tap_dims().len();
                let m = spec2.tap_dims().len();
                let want = vec![2, target.w * target.h + 1, target.d, n.min(m)];
                assert_eq!(sh1, want, "{a1:?} vs {a2:?} at {size}");
                // target dims follow the smaller-of-the-two rule
                let min_dim = |s: &ModelSpec| s.tap_dims().iter().map(|t| t.dim).min().unwrap();
                assert_eq!(target.d, min_dim(&spec1).min(min_dim(&spec2)));
            }
        }
    }
}

/// Every consumed softmax weight column is a convex combination: mixing
/// constant-per-layer stacks must reproduce a weighted average that is (a)
/// exactly 1 for all-ones inputs and (b) inside the min/max envelope.
#[test]
fn layer_matching_weights_are_convex()  {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=5);
        let tape = Tape::<f64>::new();
        let m_layer = tape.var(ArrayD::from_shape_fn(IxDyn(&[n, m]), |_| {
            rng.gen_range(-4.0..4.0)
        }));
        // constant-per-layer stacks expose the mixing weights directly
        let vals1: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let vals2: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f1 = tape.var(ArrayD::from_shape_fn(IxDyn(&[1, 2, 2, n]), |ix| vals1[ix[3]]));
        let f2 = tape.var(ArrayD::from_shape_fn(IxDyn(&[1, 2, 2, m]), |ix| vals2[ix[3]]));
        let (o1, o2) = match_layers(&tape, f1, f2, m_layer).unwrap();
        let (v1, v2) = (tape.value_owned(o1), tape.value_owned(o2));
        let (lo1, hi1) = vals1.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let (lo2, hi2) = vals2.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let contracted_first = m <= n;
        for &v in v1.iter() {
            if contracted_first {
                assert!(v >= lo1 - 1e-9 && v <= hi1 + 1e-9, "trial {trial}: {v} outside envelope");
            } else {
                assert!(vals1.iter().any(|&x| (x - v).abs() < 1e-12));
            }
        }
        for &v in v2.iter() {
            if !contracted_first {
                assert!(v >= lo2 - 1e-9 && v <= hi2 + 1e-9, "trial {trial}: {v} outside envelope");
            }
        }

        // all-ones stacks: convex weights must reproduce exactly 1 (+- fp)
        let ones1 = tape.var(ArrayD::from_elem(IxDyn(&[1, 2, 2, n]), 1.0));
        let ones2 = tape.var(ArrayD::from_elem(IxDyn(&[1, 2, 2, m]), 1.0));
        let (o1, o2) = match_layers(&tape, ones1, ones2, m_layer).unwrap();
        for &v in tape.value_owned(o1).iter().chain(tape.value_owned(o2).iter()) {
            assert!((v - 1.0).abs() < 1e-6, "weights do not sum to 1: {v}");
        }
    }
}

/// Permuting the contracted model's layers while permuting the matching
/// matrix's corresponding axis leaves the matched output unchanged.
#[test]
fn paired_layer_permutation_is_exact_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let n = 3usize;
        let m = 5usize; // m > n: model 2 is contracted with softmax(M^T)
        let tape = Tape::<f64>::new();
        let m_vals = ArrayD::from_shape_fn(IxDyn(&[n, m]), |_| rng.gen_range(-2.0..2.0));
        let f1_vals = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, n]), |_| rng.gen_range(-1.0..1.0));
        let f2_vals = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, m]), |_| rng.gen_range(-1.0..1.0));

        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        // permute f2's layer axis and M's m-axis identically
        let mut f2_perm = f2_vals.clone();
        let mut m_perm = m_vals.clone();
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            for a in 0..2 {
                for b in 0..3 {
                    for c in 0..2 {
                        f2_perm[[a, b, c, new_idx]] = f2_vals[[a, b, c, old_idx]];
                    }
                }
            }
            for r in 0..n {
                m_perm[[r, new_idx]] = m_vals[[r, old_idx]];
            }
        }

        let run = |f2v: &ArrayD<f64>, mv: &ArrayD<f64>| {
            let f1 = tape.var(f1_vals.clone());
            let f2 = tape.var(f2v.clone());
            let ml = tape.var(mv.clone());
            let (o1, o2) = match_layers(&tape, f1, f2, ml).unwrap();
            (tape.value_owned(o1), tape.value_owned(o2))
        };
        let (a1, a2) = run(&f2_vals, &m_vals);
        let (b1, b2) = run(&f2_perm, &m_perm);
        assert_eq!(a1, b1);
        // the pass-through side is untouched; the contracted side reorders
        // one fp summation, so compare at machine-epsilon scale
        for (x, y) in a2.iter().zip(b2.iter()) {
            assert!(
                (x - y).abs() < 1e-13,
                "matched output changed under paired permutation: {x} vs {y}"
            );
        }
    }
}
