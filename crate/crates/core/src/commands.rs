//! Command implementations behind the CLI binary: condense, evaluate, trace.

use crate::artifact::{
    load_artifact, save_artifact, unix_now, write_json, MetricsWriter, RunManifest, METRICS_FILE,
    REPORT_FILE, RUN_MANIFEST_FILE,
};
use crate::config::{resolve_cache_dir, CondenseConfig, ModelSpecConfig};
use crate::data::{load_dataset, DatasetSpec, Split};
use crate::error::{HmdcError, Result};
use crate::eval::{evaluate_synthetic, export_gradient_trace, write_trace_csv, EvalConfig, EvalReport};
use std::io::BufReader;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct CondenseArgs {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

/// Run a condensation from a config file; writes artifact, metrics stream,
/// and run manifest into `out_dir`. On a non-finite abort the metrics
/// written so far stay on disk.
pub fn cmd_condense(args: &CondenseArgs) -> Result<()> {
    let mut cfg = CondenseConfig::from_file(&args.config_path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dataset = DatasetSpec::for_name(&cfg.dataset)?;
    let cache = cfg.resolve_cache_dir();
    let collection = load_dataset(&dataset, Split::Train, &cache)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| HmdcError::io(&args.out_dir, e))?;
    let metrics_path = args.out_dir.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let started = unix_now();

    let (state, _records) =
        crate::condense::run_condensation(cfg.clone(), collection, |rec| writer.write(rec))?;

    save_artifact(&state.synthetic, &dataset, &state.cfg, &args.out_dir)?;
    write_json(
        &args.out_dir.join(RUN_MANIFEST_FILE),
        &RunManifest::new(state.cfg.clone(), started, metrics_path),
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub artifact_dir: PathBuf,
    pub model: String,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

/// Train fresh models of the requested architecture on a stored artifact
/// and measure best test accuracy; writes `report.json` next to the
/// artifact and returns the report.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let model = match args.model.as_str() {
        "convnet" => ModelSpecConfig::default_convnet(),
        "tinyvit" => ModelSpecConfig::default_tinyvit(),
        other => {
            return Err(HmdcError::Unsupported {
                what: "model".into(),
                value: other.into(),
            })
        }
    };
    let (synth, manifest) = load_artifact(&args.artifact_dir)?;
    let dataset = DatasetSpec::for_name(&manifest.dataset)?;
    let cache = resolve_cache_dir(manifest.config.data.cache_dir.as_deref());
    let test = load_dataset(&dataset, Split::Test, &cache)?;

    let mut cfg = EvalConfig::for_model(model);
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    let report = evaluate_synthetic(&synth, &test, &cfg)?;
    write_json(&args.artifact_dir.join(REPORT_FILE), &report)?;
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} seed(s)",
        report.arch,
        report.mean,
        report.std,
        report.per_seed.len()
    );
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TraceArgs {
    pub metrics_path: PathBuf,
    pub out_path: PathBuf,
}

/// Convert a metrics stream into the plot-ready CSV; returns the number of
/// malformed lines skipped.
pub fn cmd_trace(args: &TraceArgs) -> Result<usize> {
    let file = std::fs::File::open(&args.metrics_path)
        .map_err(|e| HmdcError::io(&args.metrics_path, e))?;
    let (rows, warnings) = export_gradient_trace(BufReader::new(file))?;
    let out = std::fs::File::create(&args.out_path).map_err(|e| HmdcError::io(&args.out_path, e))?;
    write_trace_csv(&rows, std::io::BufWriter::new(out))?;
    if warnings > 0 {
        eprintln!("warning: skipped {warnings} malformed metrics line(s)");
    }
    Ok(warnings)
}

/// One machine-parseable error line for stderr.
pub fn error_line(err: &HmdcError) -> String {
    serde_json::json!({ "error": err.to_string() }).to_string()
}
