//! The gradient-matching-lineage ConvNet: blocks of
//! [3x3 conv -> instance norm -> ReLU -> 2x2 average pool], flatten, linear
//! head. Convolutions carry no bias (the norm would cancel it).

use super::{const_param, uniform_param, FeatureStack, ModelSpec, Param, StagedParams};
use crate::error::Result;
use hmdc_tensor::compose::{instance_norm, linear};
use hmdc_tensor::{NodeId, Scalar, Tape};
use rand::Rng;

const NORM_EPS: f64 = 1e-5;

// param order per block: conv weight, norm gamma, norm beta; then head W, b
pub(super) fn init_params<T: Scalar>(
    spec: &ModelSpec,
    width: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Vec<Param<T>> {
    let (c_in, _, _) = spec.image_shape;
    let mut params = Vec::new();
    let mut ch = c_in;
    for b in 0..depth {
        let fan_in = ch * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.push(uniform_param(rng, &format!("block{b}.conv.weight"), &[width, ch, 3, 3], bound));
        params.push(const_param(&format!("block{b}.norm.gamma"), &[width], 1.0));
        params.push(const_param(&format!("block{b}.norm.beta"), &[width], 0.0));
        ch = width;
    }
    let taps = spec.tap_dims();
    let last = taps.last().expect("depth >= 1");
    let flat = last.dim * last.h * last.w;
    let bound = 1.0 / (flat as f64).sqrt();
    params.push(uniform_param(rng, "head.weight", &[spec.num_classes, flat], bound));
    params.push(uniform_param(rng, "head.bias", &[spec.num_classes], bound));
    params
}

pub(super) fn forward<T: Scalar>(
    tape: &Tape<T>,
    _spec: &ModelSpec,
    staged: &StagedParams,
    x: NodeId,
    _width: usize,
    depth: usize,
) -> Result<(NodeId, FeatureStack)> {
    let ids = &staged.ids;
    let mut h = x;
    let mut taps = Vec::with_capacity(depth);
    for b in 0..depth {
        let conv_w = ids[b * 3];
        let gamma = ids[b * 3 + 1];
        let beta = ids[b * 3 + 2];
        h = tape.conv2d(h, conv_w, 1, 1);
        h = instance_norm(tape, h, gamma, beta, NORM_EPS);
        h = tape.relu(h);
        h = tape.avg_pool2d(h, 2);
        taps.push(h);
    }
    let shape = tape.shape(h);
    let flat = shape[1] * shape[2] * shape[3];
    let flat_node = tape.reshape(h, &[shape[0], flat]);
    let head_w = ids[depth * 3];
    let head_b = ids[depth * 3 + 1];
    let logits = linear(tape, flat_node, head_w, head_b);
    Ok((logits, FeatureStack::ChannelMap { layers: taps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSpecConfig;
    use crate::models::build_model;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tap_spatial_sizes_match_shape_arithmetic() {
        let spec = ModelSpec::new(
            ModelSpecConfig::Convnet { width: 8, depth: 3 },
            10,
            (1, 28, 28),
        )
        .unwrap();
        let model = build_model::<f32>(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = Tape::<f32>::new();
        let staged = model.stage(&t, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[2, 1, 28, 28])));
        let (logits, feats) = model.forward_with_features(&t, &staged, x).unwrap();
        assert_eq!(t.shape(logits), vec![2, 10]);
        match feats {
            FeatureStack::ChannelMap { layers } => {
                let sizes: Vec<Vec<usize>> = layers.iter().map(|&l| t.shape(l)).collect();
                assert_eq!(sizes[0], vec![2, 8, 14, 14]);
                assert_eq!(sizes[1], vec![2, 8, 7, 7]);
                assert_eq!(sizes[2], vec![2, 8, 3, 3]);
            }
            _ => panic!("convnet must produce channel maps"),
        }
    }

    #[test]
    fn zero_input_zero_head_gives_equal_logits() {
        let spec = ModelSpec::new(
            ModelSpecConfig::Convnet { width: 4, depth: 2 },
            5,
            (1, 8, 8),
        )
        .unwrap();
        let mut model = build_model::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in model.params.iter_mut() {
            if p.name.starts_with("head.") {
                p.value.fill(0.0);
            }
        }
        let t = Tape::<f64>::new();
        let staged = model.stage(&t, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[3, 1, 8, 8])));
        let (logits, _) = model.forward_with_features(&t, &staged, x).unwrap();
        let v = t.value_owned(logits);
        let first = v[[0, 0]];
        assert!(v.iter().all(|&l| (l - first).abs() < 1e-12));
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let spec = ModelSpec::new(
            ModelSpecConfig::Convnet { width: 4, depth: 2 },
            5,
            (1, 8, 8),
        )
        .unwrap();
        let model = build_model::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t = Tape::<f64>::new();
        let staged = model.stage(&t, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[3, 1, 9, 8])));
        assert!(model.forward_with_features(&t, &staged, x).is_err());
    }
}
