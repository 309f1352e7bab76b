//! Condensed-set quality measurement: train fresh models on a small image
//! set, track the best test accuracy over epochs, and compare against a
//! random-real baseline with paired seeds.

use crate::config::ModelSpecConfig;
use crate::data::augment::eval_augment;
use crate::data::{ImageCollection, SyntheticSet};
use crate::error::{HmdcError, Result};
use crate::models::{build_model, classification_loss, ModelHandle, ModelSpec};
use hmdc_tensor::{lit, Scalar, Tape};
use ndarray::{s, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model: ModelSpecConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub flip: bool,
    pub crop: bool,
    pub cutout: bool,
    pub seeds: Vec<u64>,
    /// Test accuracy is measured every this many epochs (and at the last).
    pub eval_every: usize,
    /// Cap on test examples used for accuracy (deterministic prefix).
    pub test_limit: Option<usize>,
}

impl EvalConfig {
    /// Desk-scale defaults; learning rate follows the architecture
    /// (convnet 0.01, tinyvit 0.001).
    pub fn for_model(model: ModelSpecConfig) -> Self {
        let lr = match model {
            ModelSpecConfig::Convnet { .. } => 0.01,
            ModelSpecConfig::Tinyvit { .. } => 0.001,
        };
        EvalConfig {
            model,
            epochs: 300,
            lr,
            momentum: 0.9,
            batch_size: 64,
            flip: true,
            crop: true,
            cutout: true,
            seeds: vec![0, 1, 2],
            eval_every: 10,
            test_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HmdcError::Config("epochs must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HmdcError::Config("at least one seed required".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(HmdcError::Config("batch_size/eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(HmdcError::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    /// Best test accuracy per seed, in `seeds` order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub baseline: Option<Box<EvalReport>>,
    pub runtime_s: f64,
    pub config: EvalConfig,
}

impl EvalReport {
    fn from_accs(arch: &str, per_seed: Vec<f64>, runtime_s: f64, config: EvalConfig) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        EvalReport {
            arch: arch.to_string(),
            per_seed,
            mean,
            std: var.sqrt(),
            baseline: None,
            runtime_s,
            config,
        }
    }
}

/// Fraction of correct argmax predictions, evaluated in fixed-size chunks.
pub fn accuracy<T: Scalar>(
    model: &ModelHandle<T>,
    images: &Array4<T>,
    labels: &[usize],
) -> Result<f64> {
    let n = labels.len();
    let mut correct = 0usize;
    let chunk = 256;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let tape = Tape::<T>::new();
        let staged = model.stage(&tape, false);
        let x = tape.constant(images.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
        let (logits, _) = model.forward_with_features(&tape, &staged, x)?;
        let v = tape.value_owned(logits);
        for (row, &label) in v.rows().into_iter().zip(&labels[start..end]) {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (k, &l) in row.iter().enumerate() {
                if l > best_v {
                    best_v = l;
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Train one fresh model on the given images; returns the best test
/// accuracy seen at any evaluation point.
pub fn train_on_dataset(
    images: &Array4<f32>,
    labels: &[usize],
    test: &ImageCollection<f32>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(HmdcError::Shape("empty training set".into()));
    }
    let spec = ModelSpec::new(cfg.model.clone(), test.spec.num_classes, test.spec.image_shape)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.gen::<u64>());
    let mut order_rng = ChaCha8Rng::seed_from_u64(master.gen::<u64>());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(master.gen::<u64>());
    let mut model: ModelHandle<f32> = build_model(&spec, &mut init_rng)?;
    let mut velocity: Vec<ArrayD<f32>> = model
        .params
        .iter()
        .map(|p| ArrayD::zeros(p.value.raw_dim()))
        .collect();

    let test_n = cfg.test_limit.unwrap_or(test.len()).min(test.len());
    let test_images = test.images.slice(s![0..test_n, .., .., ..]).to_owned();
    let test_labels = &test.labels[0..test_n];

    let n = labels.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut best = 0.0f64;
    let (mom, lr) = (lit::<f32>(cfg.momentum), lit::<f32>(cfg.lr));
    for epoch in 0..cfg.epochs {
        // Fisher-Yates shuffle driven by the dedicated order stream
        for i in (1..n).rev() {
            indices.swap(i, order_rng.gen_range(0..=i));
        }
        for chunk in indices.chunks(cfg.batch_size) {
            let mut batch = Array4::<f32>::zeros((chunk.len(), images.dim().1, images.dim().2, images.dim().3));
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (row, &idx) in chunk.iter().enumerate() {
                batch
                    .slice_mut(s![row, .., .., ..])
                    .assign(&images.slice(s![idx, .., .., ..]));
                batch_labels.push(labels[idx]);
            }
            let batch = eval_augment(&batch, &mut aug_rng, cfg.flip, cfg.crop, cfg.cutout);
            let tape = Tape::<f32>::new();
            let staged = model.stage(&tape, true);
            let x = tape.constant(batch.into_dyn());
            let (logits, _) = model.forward_with_features(&tape, &staged, x)?;
            let ce = classification_loss(&tape, logits, &batch_labels)?;
            let ce_v = tape.scalar(ce) as f64;
            if !ce_v.is_finite() {
                return Err(HmdcError::NonFinite {
                    component: "eval_train_loss".into(),
                    step: epoch as u64,
                });
            }
            let grads = tape.backward_wrt(ce, &staged.ids, false);
            for ((param, vel), &id) in model.params.iter_mut().zip(&mut velocity).zip(&staged.ids) {
                if let Some(g) = grads.wrt(id) {
                    let gv = tape.value_owned(g);
                    vel.zip_mut_with(&gv, |v, &g| *v = *v * mom + g);
                    param.value.zip_mut_with(vel, |p, &v| *p = *p - lr * v);
                }
            }
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let acc = accuracy(&model, &test_images, test_labels)?;
            if acc > best {
                best = acc;
            }
        }
    }
    Ok(best)
}

/// Train/evaluate over every seed (seeds run as independent parallel jobs).
pub fn evaluate_images(
    images: &Array4<f32>,
    labels: &[usize],
    test: &ImageCollection<f32>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let started = Instant::now();
    let per_seed: Result<Vec<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_on_dataset(images, labels, test, cfg, seed))
        .collect();
    Ok(EvalReport::from_accs(
        cfg.model.arch_name(),
        per_seed?,
        started.elapsed().as_secs_f64(),
        cfg.clone(),
    ))
}

pub fn evaluate_synthetic(
    synth: &SyntheticSet<f32>,
    test: &ImageCollection<f32>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_images(&synth.images, &synth.labels, test, cfg)
}

/// The control arm: `ipc` real images per class, selected with `rng`,
/// evaluated under the same config (paired seeds).
pub fn random_baseline(
    train: &ImageCollection<f32>,
    test: &ImageCollection<f32>,
    ipc: usize,
    cfg: &EvalConfig,
    rng: &mut impl Rng,
) -> Result<(EvalReport, Vec<usize>)> {
    let mut indices = Vec::with_capacity(ipc * train.spec.num_classes);
    for class_id in 0..train.spec.num_classes {
        let pool = &train.by_class[class_id];
        if pool.len() < ipc {
            return Err(HmdcError::Shape(format!(
                "class {class_id} smaller than ipc {ipc}"
            )));
        }
        indices.extend(
            rand::seq::index::sample(rng, pool.len(), ipc)
                .iter()
                .map(|i| pool[i]),
        );
    }
    let (images, labels) = train.gather(&indices);
    let report = evaluate_images(&images, &labels, test, cfg)?;
    Ok((report, indices))
}

/// Per-architecture comparison of a condensed-set report against its
/// baseline. Fails unless both reports used identical eval configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub arch: String,
    pub hmdc_mean: f64,
    pub baseline_mean: f64,
    pub delta: f64,
    /// Strictly-greater test; equality fails.
    pub pass: bool,
}

pub fn compare_report(hmdc: &EvalReport, baseline: &EvalReport) -> Result<ComparisonSummary> {
    if hmdc.config != baseline.config {
        return Err(HmdcError::Config(
            "cannot compare reports with different eval configs".into(),
        ));
    }
    let delta = hmdc.mean - baseline.mean;
    Ok(ComparisonSummary {
        arch: hmdc.arch.clone(),
        hmdc_mean: hmdc.mean,
        baseline_mean: baseline.mean,
        delta,
        pass: hmdc.mean > baseline.mean,
    })
}

/// One row of the plot-ready gradient trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub g1_max: f64,
    pub g2_max: f64,
    pub g3_max: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

pub const TRACE_HEADER: &str = "step,g1_max,g2_max,g3_max,s1,s2,s3";

/// Parse a metrics stream into trace rows; malformed lines are skipped and
/// counted.
pub fn export_gradient_trace(reader: impl BufRead) -> Result<(Vec<TraceRow>, usize)> {
    let mut rows = Vec::new();
    let mut warnings = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|e| HmdcError::Other(format!("metrics read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<crate::condense::MetricsRecord>(&line) {
            Ok(rec) => rows.push(TraceRow {
                step: rec.step,
                g1_max: rec.g1_max,
                g2_max: rec.g2_max,
                g3_max: rec.g3_max,
                s1: rec.s1,
                s2: rec.s2,
                s3: rec.s3,
            }),
            Err(_) => warnings += 1,
        }
    }
    Ok((rows, warnings))
}

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    let werr = |e: std::io::Error| HmdcError::Other(format!("trace write: {e}"));
    writeln!(out, "{TRACE_HEADER}").map_err(werr)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.g1_max, r.g2_max, r.g3_max, r.s1, r.s2, r.s3
        )
        .map_err(werr)?;
    }
    Ok(())
}
