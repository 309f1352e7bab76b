//! The HMDC optimization loop: two cross-entropy gradient-matching targets
//! (one per model) plus a mutual-distillation gradient-matching target,
//! combined through the gradient-balance scales, driving momentum-SGD
//! updates of the synthetic pixels while both models and the alignment
//! head co-train on real data.
//!
//! Real-side gradients are value-only (treated as constants); synthetic-side
//! gradients are recorded with `create_graph` so the matching losses can be
//! backpropagated through them to the pixels.

use crate::config::CondenseConfig;
use crate::data::augment::{default_pad, AugParams};
use crate::data::{sample_real_batch, ImageBatch, ImageCollection, SyntheticSet};
use crate::error::{HmdcError, Result};
use crate::gbm::{max_abs, normalize_per_image_gradients, GradientAccumulator};
use crate::models::{build_model, classification_loss, ModelHandle, ModelSpec, StagedParams};
use crate::ssd::{md_loss_from_stacks, AlignmentHead};
use hmdc_tensor::compose::mse_mean;
use hmdc_tensor::{lit, Grads, NodeId, Scalar, Tape};
use ndarray::{s, Array4, ArrayD, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Number of optimization targets for the synthetic images.
pub const NUM_TARGETS: usize = 3;

/// The three per-step losses: two CE-gradient matches and the MD-gradient match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossVector {
    pub fn as_array(&self) -> [f64; NUM_TARGETS] {
        [self.l1, self.l2, self.l3]
    }
}

/// `s1*l1 + s2*l2 + s3*l3` — the inner product of the loss vector with the
/// gradient-balance scales.
pub fn total_image_loss(lv: &LossVector, scales: &[f64; NUM_TARGETS]) -> f64 {
    lv.l1 * scales[0] + lv.l2 * scales[1] + lv.l3 * scales[2]
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub iteration: usize,
    pub class_id: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub g1_max: f64,
    pub g2_max: f64,
    pub g3_max: f64,
    pub wallclock_s: f64,
}

/// Everything one condensation run mutates.
pub struct CondenseState<T: Scalar> {
    pub cfg: CondenseConfig,
    pub collection: ImageCollection<T>,
    pub synthetic: SyntheticSet<T>,
    pub model1: ModelHandle<T>,
    pub model2: ModelHandle<T>,
    pub head: AlignmentHead<T>,
    pub acc: GradientAccumulator,
    pub momentum: Array4<T>,
    pub data_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub image_steps: u64,
    pub aug_pad: usize,
}

/// Per-image-step outcome handed to the metrics stream.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub losses: LossVector,
    pub scales: [f64; NUM_TARGETS],
    pub accumulator: [f64; NUM_TARGETS],
    /// Raw max pixel-gradient magnitude per loss; zeros on non-sampled steps.
    pub gmax: [f64; NUM_TARGETS],
}

impl<T: Scalar> CondenseState<T> {
    /// Build models, head, and synthetic set from a seeded config. Seed
    /// derivation order is fixed: model1, model2, head, synthetic init,
    /// data sampling, augmentation.
    pub fn new(cfg: CondenseConfig, collection: ImageCollection<T>) -> Result<Self> {
        cfg.validate()?;
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut next = || ChaCha8Rng::seed_from_u64(master.gen::<u64>());
        let (mut r_m1, mut r_m2, mut r_head, mut r_synth, r_data, r_aug) =
            (next(), next(), next(), next(), next(), next());

        let spec1 = ModelSpec::new(
            cfg.model1.clone(),
            collection.spec.num_classes,
            collection.spec.image_shape,
        )?;
        let spec2 = ModelSpec::new(
            cfg.model2.clone(),
            collection.spec.num_classes,
            collection.spec.image_shape,
        )?;
        let model1 = build_model(&spec1, &mut r_m1)?;
        let model2 = build_model(&spec2, &mut r_m2)?;
        let head = AlignmentHead::build(&spec1, &spec2, &mut r_head);
        let synthetic = crate::data::init_synthetic_set(&collection, cfg.ipc, &mut r_synth)?;
        let momentum = Array4::zeros(synthetic.images.dim());
        let acc = GradientAccumulator::new(NUM_TARGETS, cfg.sample_every);
        let aug_pad = default_pad(collection.spec.image_shape.1);
        Ok(CondenseState {
            cfg,
            collection,
            synthetic,
            model1,
            model2,
            head,
            acc,
            momentum,
            data_rng: r_data,
            aug_rng: r_aug,
            image_steps: 0,
            aug_pad,
        })
    }

    fn check_finite(&self, v: f64, component: &str) -> Result<f64> {
        if !v.is_finite() {
            return Err(HmdcError::NonFinite {
                component: component.to_string(),
                step: self.image_steps,
            });
        }
        Ok(v)
    }

    /// One synthetic-image update for one class: sample a real class batch,
    /// build the three matching losses, balance, backpropagate to pixels
    /// only, normalize per image, and take a momentum-SGD step.
    pub fn image_update_step(&mut self, class_id: usize) -> Result<StepOutcome> {
        let tape = Tape::<T>::new();
        let staged1 = self.model1.stage(&tape, true);
        let staged2 = self.model2.stage(&tape, true);
        let staged_head = self.head.stage(&tape, false);
        let enable_md = self.cfg.enable_md;

        // one shared augmentation draw for the paired batches
        let real = sample_real_batch(
            &self.collection,
            class_id,
            self.cfg.batch_size,
            &mut self.data_rng,
        )?;
        let aug = AugParams::draw(&mut self.aug_rng, self.aug_pad);

        // real side: value-only gradients, used as constants
        let xr = tape.constant(aug.apply_arrays(&real.images).into_dyn());
        let (logits1_r, feats1_r) = self.model1.forward_with_features(&tape, &staged1, xr)?;
        let (logits2_r, feats2_r) = self.model2.forward_with_features(&tape, &staged2, xr)?;
        let ce1_r = classification_loss(&tape, logits1_r, &real.labels)?;
        let ce2_r = classification_loss(&tape, logits2_r, &real.labels)?;
        let g1_real = tape.backward_wrt(ce1_r, &staged1.ids, false);
        let g2_real = tape.backward_wrt(ce2_r, &staged2.ids, false);
        let union: Vec<NodeId> = staged1.ids.iter().chain(&staged2.ids).copied().collect();
        let g_md_real = if enable_md {
            let md_r = md_loss_from_stacks(&tape, &feats1_r, &feats2_r, &staged_head, self.head.target)?;
            Some(tape.backward_wrt(md_r, &union, false))
        } else {
            None
        };

        // synthetic side: same augmentation, differentiable to the pixels
        let xs = tape.var(self.synthetic.class_images(class_id).into_dyn());
        let xs_aug = aug.apply_node(&tape, xs);
        let synth_labels = self.synthetic.class_labels(class_id);
        let (logits1_s, feats1_s) = self.model1.forward_with_features(&tape, &staged1, xs_aug)?;
        let (logits2_s, feats2_s) = self.model2.forward_with_features(&tape, &staged2, xs_aug)?;
        let ce1_s = classification_loss(&tape, logits1_s, &synth_labels)?;
        let ce2_s = classification_loss(&tape, logits2_s, &synth_labels)?;

        let g1_synth = tape.backward_wrt(ce1_s, &staged1.ids, true);
        let l1 = grad_mse_sum(&tape, &staged1.ids, &g1_synth, &g1_real);
        let g2_synth = tape.backward_wrt(ce2_s, &staged2.ids, true);
        let l2 = grad_mse_sum(&tape, &staged2.ids, &g2_synth, &g2_real);
        let l3 = if let Some(g_md_real) = &g_md_real {
            let md_s = md_loss_from_stacks(&tape, &feats1_s, &feats2_s, &staged_head, self.head.target)?;
            let g_md_synth = tape.backward_wrt(md_s, &union, true);
            grad_mse_sum(&tape, &union, &g_md_synth, g_md_real)
        } else {
            tape.scalar_const(T::zero())
        };

        let losses = LossVector {
            l1: self.check_finite(tape.scalar(l1).to_f64().unwrap(), "l1")?,
            l2: self.check_finite(tape.scalar(l2).to_f64().unwrap(), "l2")?,
            l3: self.check_finite(tape.scalar(l3).to_f64().unwrap(), "l3")?,
        };

        // record-then-step: sampled steps pay one extra backward per loss
        // and refresh the accumulator before scales are computed
        let record = self.acc.should_record();
        let mut gmax = [0.0; NUM_TARGETS];
        let mut per_loss_grads: Option<[ArrayD<T>; NUM_TARGETS]> = None;
        if record {
            let grad_of = |root: NodeId| -> ArrayD<T> {
                let g = tape.backward_wrt(root, &[xs], false);
                g.wrt(xs)
                    .map(|id| tape.value_owned(id))
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(tape.shape(xs).as_slice())))
            };
            let (p1, p2, p3) = (grad_of(l1), grad_of(l2), grad_of(l3));
            gmax = [
                max_abs(&p1.view()),
                max_abs(&p2.view()),
                max_abs(&p3.view()),
            ];
            self.acc.record_values(&gmax)?;
            per_loss_grads = Some([p1, p2, p3]);
        }
        let scales: [f64; NUM_TARGETS] = if self.cfg.enable_gbm {
            self.acc.compute_scales().try_into().unwrap()
        } else {
            [1.0; NUM_TARGETS]
        };

        let pixel_grad: ArrayD<T> = match per_loss_grads {
            Some([p1, p2, p3]) => {
                let mut total = p1.mapv(|v| v * lit::<T>(scales[0]));
                total.zip_mut_with(&p2, |t, &p| *t = *t + p * lit::<T>(scales[1]));
                total.zip_mut_with(&p3, |t, &p| *t = *t + p * lit::<T>(scales[2]));
                total
            }
            None => {
                let total = tape.add(
                    tape.add(tape.scale(l1, scales[0]), tape.scale(l2, scales[1])),
                    tape.scale(l3, scales[2]),
                );
                let g = tape.backward_wrt(total, &[xs], false);
                g.wrt(xs)
                    .map(|id| tape.value_owned(id))
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(tape.shape(xs).as_slice())))
            }
        };
        if pixel_grad.iter().any(|v| !v.to_f64().unwrap().is_finite()) {
            return Err(HmdcError::NonFinite {
                component: "pixel_gradient".into(),
                step: self.image_steps,
            });
        }

        // normalize per image, then momentum SGD on the class slab
        let grad4 = normalize_per_image_gradients(
            pixel_grad.into_dimensionality::<Ix4>().expect("pixel grad is 4-d"),
        );
        let range = self.synthetic.class_range(class_id);
        let mom = lit::<T>(self.cfg.momentum_images);
        let lr = lit::<T>(self.cfg.lr_images);
        let mut vel = self.momentum.slice_mut(s![range.start..range.end, .., .., ..]);
        vel.zip_mut_with(&grad4, |v, &g| *v = *v * mom + g);
        let mut imgs = self
            .synthetic
            .images
            .slice_mut(s![range.start..range.end, .., .., ..]);
        imgs.zip_mut_with(&vel.view(), |x, &v| *x = *x - lr * v);

        self.acc.steps_seen += 1;
        self.image_steps += 1;

        let acc_vals = self.acc.values();
        Ok(StepOutcome {
            losses,
            scales,
            accumulator: [acc_vals[0], acc_vals[1], acc_vals[2]],
            gmax,
        })
    }

    /// One SGD step for both models on a full-train-set batch:
    /// `L_f = CE(f(x), y) + L_MD(x)` (CE alone when MD is disabled). The
    /// alignment head stays frozen here.
    pub fn model_update_step(&mut self, real: &ImageBatch<T>) -> Result<()> {
        let tape = Tape::<T>::new();
        let staged1 = self.model1.stage(&tape, true);
        let staged2 = self.model2.stage(&tape, true);
        let x = tape.constant(real.images.clone().into_dyn());
        let (logits1, feats1) = self.model1.forward_with_features(&tape, &staged1, x)?;
        let (logits2, feats2) = self.model2.forward_with_features(&tape, &staged2, x)?;
        let ce1 = classification_loss(&tape, logits1, &real.labels)?;
        let ce2 = classification_loss(&tape, logits2, &real.labels)?;
        // d(ce1 + ce2 + md)/dθ_i == d(ce_i + md)/dθ_i — one backward serves both models
        let mut total = tape.add(ce1, ce2);
        if self.cfg.enable_md {
            let staged_head = self.head.stage(&tape, false);
            let md = md_loss_from_stacks(&tape, &feats1, &feats2, &staged_head, self.head.target)?;
            total = tape.add(total, md);
        }
        self.check_finite(tape.scalar(total).to_f64().unwrap(), "model_update_loss")?;
        let wrt: Vec<NodeId> = staged1.ids.iter().chain(&staged2.ids).copied().collect();
        let grads = tape.backward_wrt(total, &wrt, false);
        sgd_step(&tape, &mut self.model1, &staged1, &grads, self.cfg.lr_model1);
        sgd_step(&tape, &mut self.model2, &staged2, &grads, self.cfg.lr_model2);
        Ok(())
    }

    /// One SGD step of the affine projections and layer-matching matrix on
    /// `L_MD` over a real batch, both models frozen.
    pub fn alignment_update_step(&mut self, real: &ImageBatch<T>) -> Result<()> {
        if !self.cfg.enable_md {
            return Ok(());
        }
        let tape = Tape::<T>::new();
        let staged1 = self.model1.stage(&tape, false);
        let staged2 = self.model2.stage(&tape, false);
        let staged_head = self.head.stage(&tape, true);
        let x = tape.constant(real.images.clone().into_dyn());
        let (_, feats1) = self.model1.forward_with_features(&tape, &staged1, x)?;
        let (_, feats2) = self.model2.forward_with_features(&tape, &staged2, x)?;
        let md = md_loss_from_stacks(&tape, &feats1, &feats2, &staged_head, self.head.target)?;
        self.check_finite(tape.scalar(md).to_f64().unwrap(), "alignment_loss")?;
        let mut head_ids: Vec<NodeId> = vec![staged_head.m_layer];
        for layers in &staged_head.affine {
            for &(w_id, b_id) in layers {
                head_ids.push(w_id);
                head_ids.push(b_id);
            }
        }
        let grads = tape.backward_wrt(md, &head_ids, false);
        let lr = lit::<T>(self.cfg.lr_alignment);
        for (m, staged_layers) in staged_head.affine.iter().enumerate() {
            for (l, &(w_id, b_id)) in staged_layers.iter().enumerate() {
                if let Some(g) = grads.wrt(w_id) {
                    let gv = tape.value_owned(g);
                    self.head.affine[m][l].0.zip_mut_with(&gv, |p, &g| *p = *p - lr * g);
                }
                if let Some(g) = grads.wrt(b_id) {
                    let gv = tape.value_owned(g);
                    self.head.affine[m][l].1.zip_mut_with(&gv, |p, &g| *p = *p - lr * g);
                }
            }
        }
        if let Some(g) = grads.wrt(staged_head.m_layer) {
            let gv = tape.value_owned(g);
            self.head.m_layer.zip_mut_with(&gv, |p, &g| *p = *p - lr * g);
        }
        Ok(())
    }

    /// Uniform batch over the whole training split (not class-conditional).
    pub fn sample_full_batch(&mut self) -> Result<ImageBatch<T>> {
        let n = self.collection.len();
        let bs = self.cfg.batch_size;
        let indices: Vec<usize> = if n >= bs {
            rand::seq::index::sample(&mut self.data_rng, n, bs).into_vec()
        } else {
            (0..bs).map(|_| self.data_rng.gen_range(0..n)).collect()
        };
        let (images, labels) = self.collection.gather(&indices);
        ImageBatch::new(images, labels, self.collection.spec.num_classes)
    }
}

/// Sum over parameter arrays of the MSE between synthetic-side and
/// real-side gradients. Missing gradients enter as zeros.
fn grad_mse_sum<T: Scalar>(
    tape: &Tape<T>,
    param_ids: &[NodeId],
    g_synth: &Grads,
    g_real: &Grads,
) -> NodeId {
    let mut total: Option<NodeId> = None;
    for &pid in param_ids {
        let term = match (g_synth.wrt(pid), g_real.wrt(pid)) {
            (None, None) => continue,
            (Some(a), Some(b)) => mse_mean(tape, a, b),
            (Some(a), None) => {
                let z = tape.constant(ArrayD::zeros(IxDyn(tape.shape(a).as_slice())));
                mse_mean(tape, a, z)
            }
            (None, Some(b)) => {
                let z = tape.constant(ArrayD::zeros(IxDyn(tape.shape(b).as_slice())));
                mse_mean(tape, z, b)
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total.unwrap_or_else(|| tape.scalar_const(T::zero()))
}

fn sgd_step<T: Scalar>(
    tape: &Tape<T>,
    model: &mut ModelHandle<T>,
    staged: &StagedParams,
    grads: &Grads,
    lr: f64,
) {
    let lr = lit::<T>(lr);
    for (param, &id) in model.params.iter_mut().zip(&staged.ids) {
        if let Some(g) = grads.wrt(id) {
            let gv = tape.value_owned(g);
            param.value.zip_mut_with(&gv, |p, &g| *p = *p - lr * g);
        }
    }
}

/// Gradient-matching loss for one model between a real and a synthetic
/// batch (both class-matched): the summed per-parameter-array MSE between
/// the two cross-entropy gradients.
pub fn gradient_match_loss<T: Scalar>(
    model: &ModelHandle<T>,
    real: &ImageBatch<T>,
    synth: &ImageBatch<T>,
) -> Result<f64> {
    let tape = Tape::<T>::new();
    let staged = model.stage(&tape, true);
    let xr = tape.constant(real.images.clone().into_dyn());
    let (logits_r, _) = model.forward_with_features(&tape, &staged, xr)?;
    let ce_r = classification_loss(&tape, logits_r, &real.labels)?;
    let g_real = tape.backward_wrt(ce_r, &staged.ids, false);
    let xs = tape.constant(synth.images.clone().into_dyn());
    let (logits_s, _) = model.forward_with_features(&tape, &staged, xs)?;
    let ce_s = classification_loss(&tape, logits_s, &synth.labels)?;
    let g_synth = tape.backward_wrt(ce_s, &staged.ids, false);
    let loss = grad_mse_sum(&tape, &staged.ids, &g_synth, &g_real);
    Ok(tape.scalar(loss).to_f64().unwrap())
}

/// MD-gradient matching loss: summed per-array MSE between
/// `∇_{θ1∪θ2} L_MD(real)` and `∇_{θ1∪θ2} L_MD(synth)` (alignment head
/// excluded from the differentiation variables).
pub fn md_gradient_match_loss<T: Scalar>(
    model1: &ModelHandle<T>,
    model2: &ModelHandle<T>,
    head: &AlignmentHead<T>,
    real: &ImageBatch<T>,
    synth: &ImageBatch<T>,
) -> Result<f64> {
    let tape = Tape::<T>::new();
    let staged1 = model1.stage(&tape, true);
    let staged2 = model2.stage(&tape, true);
    let staged_head = head.stage(&tape, false);
    let union: Vec<NodeId> = staged1.ids.iter().chain(&staged2.ids).copied().collect();
    let md_of = |x: &Array4<T>| -> Result<NodeId> {
        let xn = tape.constant(x.clone().into_dyn());
        let (_, f1) = model1.forward_with_features(&tape, &staged1, xn)?;
        let (_, f2) = model2.forward_with_features(&tape, &staged2, xn)?;
        md_loss_from_stacks(&tape, &f1, &f2, &staged_head, head.target)
    };
    let md_r = md_of(&real.images)?;
    let g_real = tape.backward_wrt(md_r, &union, false);
    let md_s = md_of(&synth.images)?;
    let g_synth = tape.backward_wrt(md_s, &union, false);
    let loss = grad_mse_sum(&tape, &union, &g_synth, &g_real);
    Ok(tape.scalar(loss).to_f64().unwrap())
}

/// The three matching losses and the gradient of their scaled sum with
/// respect to the synthetic pixels, for given batches and frozen state.
/// Verification/diagnostic entry point; the training loop keeps its own
/// fused path.
pub fn image_loss_pixel_grad<T: Scalar>(
    model1: &ModelHandle<T>,
    model2: &ModelHandle<T>,
    head: &AlignmentHead<T>,
    real: &ImageBatch<T>,
    synth: &ImageBatch<T>,
    scales: &[f64; NUM_TARGETS],
    enable_md: bool,
) -> Result<(LossVector, Array4<T>)> {
    let tape = Tape::<T>::new();
    let staged1 = model1.stage(&tape, true);
    let staged2 = model2.stage(&tape, true);
    let staged_head = head.stage(&tape, false);
    let union: Vec<NodeId> = staged1.ids.iter().chain(&staged2.ids).copied().collect();

    let xr = tape.constant(real.images.clone().into_dyn());
    let (logits1_r, feats1_r) = model1.forward_with_features(&tape, &staged1, xr)?;
    let (logits2_r, feats2_r) = model2.forward_with_features(&tape, &staged2, xr)?;
    let ce1_r = classification_loss(&tape, logits1_r, &real.labels)?;
    let ce2_r = classification_loss(&tape, logits2_r, &real.labels)?;
    let g1_real = tape.backward_wrt(ce1_r, &staged1.ids, false);
    let g2_real = tape.backward_wrt(ce2_r, &staged2.ids, false);
    let g_md_real = if enable_md {
        let md_r = md_loss_from_stacks(&tape, &feats1_r, &feats2_r, &staged_head, head.target)?;
        Some(tape.backward_wrt(md_r, &union, false))
    } else {
        None
    };

    let xs = tape.var(synth.images.clone().into_dyn());
    let (logits1_s, feats1_s) = model1.forward_with_features(&tape, &staged1, xs)?;
    let (logits2_s, feats2_s) = model2.forward_with_features(&tape, &staged2, xs)?;
    let ce1_s = classification_loss(&tape, logits1_s, &synth.labels)?;
    let ce2_s = classification_loss(&tape, logits2_s, &synth.labels)?;
    let g1_synth = tape.backward_wrt(ce1_s, &staged1.ids, true);
    let l1 = grad_mse_sum(&tape, &staged1.ids, &g1_synth, &g1_real);
    let g2_synth = tape.backward_wrt(ce2_s, &staged2.ids, true);
    let l2 = grad_mse_sum(&tape, &staged2.ids, &g2_synth, &g2_real);
    let l3 = if let Some(g_md_real) = &g_md_real {
        let md_s = md_loss_from_stacks(&tape, &feats1_s, &feats2_s, &staged_head, head.target)?;
        let g_md_synth = tape.backward_wrt(md_s, &union, true);
        grad_mse_sum(&tape, &union, &g_md_synth, g_md_real)
    } else {
        tape.scalar_const(T::zero())
    };
    let losses = LossVector {
        l1: tape.scalar(l1).to_f64().unwrap(),
        l2: tape.scalar(l2).to_f64().unwrap(),
        l3: tape.scalar(l3).to_f64().unwrap(),
    };
    let total = tape.add(
        tape.add(tape.scale(l1, scales[0]), tape.scale(l2, scales[1])),
        tape.scale(l3, scales[2]),
    );
    let g = tape.backward_wrt(total, &[xs], false);
    let pixel = g
        .wrt(xs)
        .map(|id| tape.value_owned(id))
        .unwrap_or_else(|| ArrayD::zeros(IxDyn(tape.shape(xs).as_slice())))
        .into_dimensionality::<Ix4>()
        .expect("pixel grad is 4-d");
    Ok((losses, pixel))
}

/// Run the full condensation schedule: per inner loop, one image update per
/// class, then a model update, then an alignment update. Emits one metrics
/// record per logged image step through `sink` (and returns them all).
pub fn run_condensation<T: Scalar>(
    cfg: CondenseConfig,
    collection: ImageCollection<T>,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(CondenseState<T>, Vec<MetricsRecord>)> {
    let log_every = cfg.log_every as u64;
    let mut state = CondenseState::new(cfg, collection)?;
    let classes = state.collection.spec.num_classes;
    let started = Instant::now();
    let mut records = Vec::new();
    for iteration in 0..state.cfg.iterations {
        for _ in 0..state.cfg.inner_loops {
            for class_id in 0..classes {
                let step = state.image_steps;
                let out = state.image_update_step(class_id)?;
                if step % log_every == 0 {
                    let rec = MetricsRecord {
                        step,
                        iteration,
                        class_id,
                        l1: out.losses.l1,
                        l2: out.losses.l2,
                        l3: out.losses.l3,
                        s1: out.scales[0],
                        s2: out.scales[1],
                        s3: out.scales[2],
                        a1: out.accumulator[0],
                        a2: out.accumulator[1],
                        a3: out.accumulator[2],
                        g1_max: out.gmax[0],
                        g2_max: out.gmax[1],
                        g3_max: out.gmax[2],
                        wallclock_s: started.elapsed().as_secs_f64(),
                    };
                    sink(&rec)?;
                    records.push(rec);
                }
            }
            let model_batch = state.sample_full_batch()?;
            state.model_update_step(&model_batch)?;
            if state.cfg.enable_md {
                let align_batch = state.sample_full_batch()?;
                state.alignment_update_step(&align_batch)?;
            }
        }
    }
    Ok((state, records))
}
