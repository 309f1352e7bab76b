//! Gradient Balance Module: a per-target accumulator of max pixel-gradient
//! magnitudes and the reciprocal-of-normalized-accumulator scaling that
//! keeps every optimization target pushing the synthetic images with
//! comparable force.

use crate::error::{HmdcError, Result};
use hmdc_tensor::Scalar;
use ndarray::{Array4, ArrayViewD, Axis};

/// Running sums of sampled max gradient magnitudes, one slot per
/// optimization target. Entries never decrease.
#[derive(Debug, Clone)]
pub struct GradientAccumulator {
    a: Vec<f64>,
    pub sample_every: usize,
    pub steps_seen: u64,
}

impl GradientAccumulator {
    pub fn new(targets: usize, sample_every: usize) -> Self {
        GradientAccumulator {
            a: vec![0.0; targets],
            sample_every: sample_every.max(1),
            steps_seen: 0,
        }
    }

    pub fn targets(&self) -> usize {
        self.a.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    /// Whether the current step is a sampling step (the caller advances
    /// `steps_seen` once per image-update step).
    pub fn should_record(&self) -> bool {
        self.steps_seen % self.sample_every as u64 == 0
    }

    /// `a_i += max(|grad_i|)` for each target's pixel-gradient array.
    pub fn record_magnitudes<T: Scalar>(&mut self, per_loss_pixel_grads: &[ArrayViewD<T>]) -> Result<Vec<f64>> {
        if per_loss_pixel_grads.len() != self.a.len() {
            return Err(HmdcError::Shape(format!(
                "accumulator has {} targets, got {} gradient arrays",
                self.a.len(),
                per_loss_pixel_grads.len()
            )));
        }
        let mags: Vec<f64> = per_loss_pixel_grads.iter().map(|g| max_abs(g)).collect();
        for (slot, &m) in self.a.iter_mut().zip(&mags) {
            *slot += m;
        }
        Ok(mags)
    }

    /// Record pre-computed magnitudes (same contract as `record_magnitudes`).
    pub fn record_values(&mut self, mags: &[f64]) -> Result<()> {
        if mags.len() != self.a.len() {
            return Err(HmdcError::Shape("accumulator arity mismatch".into()));
        }
        for (slot, &m) in self.a.iter_mut().zip(mags) {
            *slot += m;
        }
        Ok(())
    }

    /// `s_i = min(A)/a_i`; all-ones before anything was recorded. The
    /// entry at the argmin of A is exactly 1 and every entry is in (0, 1].
    pub fn compute_scales(&self) -> Vec<f64> {
        if self.a.iter().any(|&v| v == 0.0) {
            return vec![1.0; self.a.len()];
        }
        let min = self.a.iter().copied().fold(f64::INFINITY, f64::min);
        self.a.iter().map(|&v| min / v).collect()
    }
}

/// Largest absolute entry of a gradient array.
pub fn max_abs<T: Scalar>(g: &ArrayViewD<T>) -> f64 {
    g.iter()
        .map(|v| {
            let f = v.to_f64().unwrap_or(f64::NAN);
            f.abs()
        })
        .fold(0.0, f64::max)
}

/// Divide each image's gradient slab by its own l2 norm; slabs with norm
/// below `1e-12` pass through unchanged.
pub fn normalize_per_image_gradients<T: Scalar>(mut grads: Array4<T>) -> Array4<T> {
    for mut slab in grads.axis_iter_mut(Axis(0)) {
        let norm = slab
            .iter()
            .map(|v| {
                let f = v.to_f64().unwrap();
                f * f
            })
            .sum::<f64>()
            .sqrt();
        if norm >= 1e-12 {
            let inv = hmdc_tensor::lit::<T>(1.0 / norm);
            slab.mapv_inplace(|v| v * inv);
        }
    }
    grads
}
