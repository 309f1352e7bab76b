//! The heterogeneous model pair: a compact convolutional net and a small
//! vision transformer, both exposing per-block intermediate features
//! alongside logits. Parameter enumeration order is fixed at construction
//! and never changes — gradient matching depends on it.

mod convnet;
mod vit;

use crate::config::ModelSpecConfig;
use crate::error::{HmdcError, Result};
use hmdc_tensor::compose::cross_entropy_mean;
use hmdc_tensor::{lit, NodeId, Scalar, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Geometry of one feature tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapDim {
    pub dim: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: ModelSpecConfig,
    pub num_classes: usize,
    /// (C, H, W)
    pub image_shape: (usize, usize, usize),
}

impl ModelSpec {
    pub fn new(arch: ModelSpecConfig, num_classes: usize, image_shape: (usize, usize, usize)) -> Result<Self> {
        let spec = ModelSpec {
            arch,
            num_classes,
            image_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.image_shape;
        match self.arch {
            ModelSpecConfig::Convnet { width, depth } => {
                if depth == 0 || width == 0 {
                    return Err(HmdcError::Config("convnet width/depth must be >= 1".into()));
                }
                if h >> depth == 0 || w >> depth == 0 {
                    return Err(HmdcError::Config(format!(
                        "convnet depth {depth} collapses a {h}x{w} image"
                    )));
                }
            }
            ModelSpecConfig::Tinyvit { patch, dim, depth, heads } => {
                if depth == 0 || dim == 0 || heads == 0 {
                    return Err(HmdcError::Config("tinyvit dims must be >= 1".into()));
                }
                if h % patch != 0 || w % patch != 0 {
                    return Err(HmdcError::Config(format!(
                        "image {h}x{w} not divisible by patch {patch}"
                    )));
                }
                if dim % heads != 0 {
                    return Err(HmdcError::Config(format!(
                        "dim {dim} not divisible by heads {heads}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-tap feature geometry, computable without running the model.
    pub fn tap_dims(&self) -> Vec<TapDim> {
        let (_, h, w) = self.image_shape;
        match self.arch {
            ModelSpecConfig::Convnet { width, depth } => {
                let (mut ch, mut cw) = (h, w);
                (0..depth)
                    .map(|_| {
                        ch /= 2;
                        cw /= 2;
                        TapDim { dim: width, h: ch, w: cw }
                    })
                    .collect()
            }
            ModelSpecConfig::Tinyvit { patch, dim, depth, .. } => {
                let tap = TapDim {
                    dim,
                    h: h / patch,
                    w: w / patch,
                };
                vec![tap; depth]
            }
        }
    }

    pub fn arch_name(&self) -> &'static str {
        self.arch.arch_name()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Tape handles for one staging of a parameter set.
pub struct StagedParams {
    pub ids: Vec<NodeId>,
}

/// Per-layer intermediate features from one forward pass.
pub enum FeatureStack {
    /// Transformer: each layer `[N, w*h+1, d]`, CLS token first.
    TokenGrid { layers: Vec<NodeId>, grid: (usize, usize) },
    /// CNN: each layer `[N, d_l, h_l, w_l]`.
    ChannelMap { layers: Vec<NodeId> },
}

impl FeatureStack {
    pub fn layer_count(&self) -> usize {
        match self {
            FeatureStack::TokenGrid { layers, .. } => layers.len(),
            FeatureStack::ChannelMap { layers } => layers.len(),
        }
    }
}

/// A model: spec plus its parameters. Mutable single-owner during training.
pub struct ModelHandle<T: Scalar> {
    pub spec: ModelSpec,
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ModelHandle<T> {
    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Put all parameters on a tape, as differentiable leaves when
    /// `trainable`, constants otherwise.
    pub fn stage(&self, tape: &Tape<T>, trainable: bool) -> StagedParams {
        let ids = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.var(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        StagedParams { ids }
    }

    /// Forward pass returning logits `[N, num_classes]` and the per-block
    /// feature stack. Fails on input shape mismatch.
    pub fn forward_with_features(
        &self,
        tape: &Tape<T>,
        staged: &StagedParams,
        x: NodeId,
    ) -> Result<(NodeId, FeatureStack)> {
        let shape = tape.shape(x);
        let (c, h, w) = self.spec.image_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(HmdcError::Shape(format!(
                "input shape {shape:?} does not match model image shape ({c},{h},{w})"
            )));
        }
        match self.spec.arch {
            ModelSpecConfig::Convnet { width, depth } => {
                convnet::forward(tape, &self.spec, staged, x, width, depth)
            }
            ModelSpecConfig::Tinyvit { patch, dim, depth, heads } => {
                vit::forward(tape, &self.spec, staged, x, patch, dim, depth, heads)
            }
        }
    }
}

/// Mean cross-entropy of logits against labels.
pub fn classification_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HmdcError::Shape(format!(
            "logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(HmdcError::Shape(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(cross_entropy_mean(tape, logits, labels))
}

/// Build and initialize a model. Initialization draws are made in `f64`
/// and cast, so the parameter stream is identical across scalar types.
pub fn build_model<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> Result<ModelHandle<T>> {
    spec.validate()?;
    let params = match spec.arch {
        ModelSpecConfig::Convnet { width, depth } => convnet::init_params(spec, width, depth, rng),
        ModelSpecConfig::Tinyvit { patch, dim, depth, heads } => {
            vit::init_params(spec, patch, dim, depth, heads, rng)
        }
    };
    Ok(ModelHandle {
        spec: spec.clone(),
        params,
    })
}

pub(crate) fn uniform_param<T: Scalar>(
    rng: &mut impl Rng,
    name: &str,
    shape: &[usize],
    bound: f64,
) -> Param<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
    Param {
        name: name.to_string(),
        value: ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
    }
}

pub(crate) fn normal_param<T: Scalar>(
    rng: &mut impl Rng,
    name: &str,
    shape: &[usize],
    std: f64,
) -> Param<T> {
    let n: usize = shape.iter().product();
    // Box-Muller from uniform draws keeps us independent of distribution crates.
    let data: Vec<T> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            lit((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std)
        })
        .collect();
    Param {
        name: name.to_string(),
        value: ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
    }
}

pub(crate) fn const_param<T: Scalar>(name: &str, shape: &[usize], v: f64) -> Param<T> {
    Param {
        name: name.to_string(),
        value: ArrayD::from_elem(IxDyn(shape), lit::<T>(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mnist_spec(arch: ModelSpecConfig) -> ModelSpec {
        ModelSpec::new(arch, 10, (1, 28, 28)).unwrap()
    }

    #[test]
    fn convnet_has_three_taps_on_mnist() {
        let spec = mnist_spec(ModelSpecConfig::default_convnet());
        let taps = spec.tap_dims();
        assert_eq!(taps.len(), 3);
        // 28 -> 14 -> 7 -> 3 under conv(same) + 2x2 floor pooling
        assert_eq!(
            taps,
            vec![
                TapDim { dim: 128, h: 14, w: 14 },
                TapDim { dim: 128, h: 7, w: 7 },
                TapDim { dim: 128, h: 3, w: 3 },
            ]
        );
    }

    #[test]
    fn tinyvit_has_depth_taps() {
        let spec = mnist_spec(ModelSpecConfig::default_tinyvit());
        let taps = spec.tap_dims();
        assert_eq!(taps.len(), 4);
        assert!(taps.iter().all(|t| *t == TapDim { dim: 64, h: 7, w: 7 }));
    }

    #[test]
    fn indivisible_patch_rejected() {
        let bad = ModelSpec::new(
            ModelSpecConfig::Tinyvit { patch: 5, dim: 64, depth: 4, heads: 4 },
            10,
            (1, 28, 28),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn same_seed_identical_parameters() {
        let spec = mnist_spec(ModelSpecConfig::Tinyvit { patch: 4, dim: 16, depth: 2, heads: 2 });
        let a: ModelHandle<f32> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b: ModelHandle<f32> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let t = Tape::<f64>::new();
        let logits = t.var(ArrayD::zeros(IxDyn(&[3, 10])));
        let l = classification_loss(&t, logits, &[1, 2, 3]).unwrap();
        assert!((t.scalar(l) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let t = Tape::<f64>::new();
        let logits = t.var(ArrayD::zeros(IxDyn(&[2, 4])));
        assert!(classification_loss(&t, logits, &[1, 4]).is_err());
    }
}
