//! Bit-exact persistence: condensed artifacts (raw little-endian float32
//! images + int64 labels + JSON manifest), a named-tensor container for
//! checkpoints, and the JSONL metrics writer.

use crate::config::CondenseConfig;
use crate::data::{DatasetSpec, SyntheticSet};
use crate::error::{HmdcError, Result};
use crate::models::ModelHandle;
use crate::ssd::AlignmentHead;
use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const REPORT_FILE: &str = "report.json";

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn code_version() -> String {
    format!("hmdc-{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub dataset: String,
    pub ipc: usize,
    /// [N, C, H, W]
    pub shape: [usize; 4],
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Fully-defaulted config echo, not the user's partial input.
    pub config: CondenseConfig,
    pub seed: u64,
    pub version: String,
    pub created_unix: u64,
}

/// Write `images.bin` (f32 LE, row-major), `labels.bin` (i64 LE), and the
/// manifest. Empty sets are rejected.
pub fn save_artifact(
    synth: &SyntheticSet<f32>,
    dataset: &DatasetSpec,
    config: &CondenseConfig,
    dir: &Path,
) -> Result<()> {
    if synth.is_empty() {
        return Err(HmdcError::Integrity("refusing to save an empty synthetic set".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| HmdcError::io(dir, e))?;
    let (n, c, h, w) = synth.images.dim();

    let img_path = dir.join(IMAGES_FILE);
    let mut img = BufWriter::new(File::create(&img_path).map_err(|e| HmdcError::io(&img_path, e))?);
    let mut buf = Vec::with_capacity(n * c * h * w * 4);
    for &v in synth.images.as_slice().expect("synthetic images contiguous") {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    img.write_all(&buf).map_err(|e| HmdcError::io(&img_path, e))?;
    img.flush().map_err(|e| HmdcError::io(&img_path, e))?;

    let lab_path = dir.join(LABELS_FILE);
    let mut lab = BufWriter::new(File::create(&lab_path).map_err(|e| HmdcError::io(&lab_path, e))?);
    for &l in &synth.labels {
        lab.write_all(&(l as i64).to_le_bytes())
            .map_err(|e| HmdcError::io(&lab_path, e))?;
    }
    lab.flush().map_err(|e| HmdcError::io(&lab_path, e))?;

    let manifest = ArtifactManifest {
        dataset: dataset.name.clone(),
        ipc: synth.ipc,
        shape: [n, c, h, w],
        mean: dataset.mean.clone(),
        std: dataset.std.clone(),
        config: config.clone(),
        seed: config.seed,
        version: code_version(),
        created_unix: unix_now(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Read an artifact back; every length is checked against the manifest.
pub fn load_artifact(dir: &Path) -> Result<(SyntheticSet<f32>, ArtifactManifest)> {
    let manifest: ArtifactManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let [n, c, h, w] = manifest.shape;
    if n == 0 || manifest.ipc == 0 || n % manifest.ipc != 0 {
        return Err(HmdcError::Integrity(format!(
            "manifest shape {n} not a multiple of ipc {}",
            manifest.ipc
        )));
    }

    let img_path = dir.join(IMAGES_FILE);
    let img_bytes = std::fs::read(&img_path).map_err(|e| HmdcError::io(&img_path, e))?;
    if img_bytes.len() != n * c * h * w * 4 {
        return Err(HmdcError::Integrity(format!(
            "images.bin holds {} bytes, manifest implies {}",
            img_bytes.len(),
            n * c * h * w * 4
        )));
    }
    let mut values = Vec::with_capacity(n * c * h * w);
    for chunk in img_bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let images = Array4::from_shape_vec((n, c, h, w), values).expect("shape checked");

    let lab_path = dir.join(LABELS_FILE);
    let lab_bytes = std::fs::read(&lab_path).map_err(|e| HmdcError::io(&lab_path, e))?;
    if lab_bytes.len() != n * 8 {
        return Err(HmdcError::Integrity(format!(
            "labels.bin holds {} bytes, manifest implies {}",
            lab_bytes.len(),
            n * 8
        )));
    }
    let num_classes = n / manifest.ipc;
    let mut labels = Vec::with_capacity(n);
    for chunk in lab_bytes.chunks_exact(8) {
        let v = i64::from_le_bytes(chunk.try_into().unwrap());
        if v < 0 || v as usize >= num_classes {
            return Err(HmdcError::Integrity(format!("label {v} out of range")));
        }
        labels.push(v as usize);
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != i / manifest.ipc {
            return Err(HmdcError::Integrity(
                "labels are not contiguous by class".into(),
            ));
        }
    }
    Ok((
        SyntheticSet {
            images,
            labels,
            ipc: manifest.ipc,
            num_classes,
        },
        manifest,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: CondenseConfig,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
    pub metrics_path: PathBuf,
}

impl RunManifest {
    pub fn new(config: CondenseConfig, started_unix: u64, metrics_path: PathBuf) -> Self {
        RunManifest {
            seed: config.seed,
            config,
            started_unix,
            finished_unix: unix_now(),
            version: code_version(),
            metrics_path,
        }
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| HmdcError::Other(format!("json encode: {e}")))?;
    std::fs::write(path, text).map_err(|e| HmdcError::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| HmdcError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HmdcError::Integrity(format!("{}: {e}", path.display())))
}

/// Line-buffered JSONL metrics writer; each record is flushed so partial
/// streams survive aborts.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HmdcError::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &crate::condense::MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| HmdcError::Other(format!("metrics encode: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| HmdcError::io(&self.path, e))?;
        self.out.flush().map_err(|e| HmdcError::io(&self.path, e))
    }
}

// ---- named-tensor container (model / alignment-head checkpoints) --------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerManifest {
    arch: String,
    tensors: Vec<TensorEntry>,
}

/// Write named f32 tensors as one raw little-endian blob plus a manifest
/// carrying the `arch` field.
pub fn save_tensor_container(dir: &Path, arch: &str, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HmdcError::io(dir, e))?;
    let data_path = dir.join("tensors.bin");
    let mut out = BufWriter::new(File::create(&data_path).map_err(|e| HmdcError::io(&data_path, e))?);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, value) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
        });
        for &v in value.iter() {
            out.write_all(&v.to_le_bytes())
                .map_err(|e| HmdcError::io(&data_path, e))?;
        }
    }
    out.flush().map_err(|e| HmdcError::io(&data_path, e))?;
    write_json(
        &dir.join("tensors.json"),
        &ContainerManifest {
            arch: arch.to_string(),
            tensors: entries,
        },
    )
}

pub fn load_tensor_container(dir: &Path) -> Result<(String, Vec<(String, ArrayD<f32>)>)> {
    let manifest: ContainerManifest = read_json(&dir.join("tensors.json"))?;
    let data_path = dir.join("tensors.bin");
    let mut file = File::open(&data_path).map_err(|e| HmdcError::io(&data_path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| HmdcError::io(&data_path, e))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != expected {
        return Err(HmdcError::Integrity(format!(
            "tensors.bin holds {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for chunk in bytes[offset..offset + count * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += count * 4;
        tensors.push((
            entry.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("shape consistent"),
        ));
    }
    Ok((manifest.arch, tensors))
}

/// Model checkpoint: all parameters in construction order.
pub fn save_model_checkpoint(model: &ModelHandle<f32>, dir: &Path) -> Result<()> {
    let tensors: Vec<(String, ArrayD<f32>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    save_tensor_container(dir, model.spec.arch_name(), &tensors)
}

/// Restore parameters into an already-built model; names and shapes must
/// match the handle exactly.
pub fn load_model_checkpoint(model: &mut ModelHandle<f32>, dir: &Path) -> Result<()> {
    let (arch, tensors) = load_tensor_container(dir)?;
    if arch != model.spec.arch_name() {
        return Err(HmdcError::Integrity(format!(
            "checkpoint arch {arch} does not match model {}",
            model.spec.arch_name()
        )));
    }
    if tensors.len() != model.params.len() {
        return Err(HmdcError::Integrity(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (param, (name, value)) in model.params.iter_mut().zip(tensors) {
        if param.name != name || param.value.shape() != value.shape() {
            return Err(HmdcError::Integrity(format!(
                "checkpoint tensor {name} does not match parameter {}",
                param.name
            )));
        }
        param.value = value;
    }
    Ok(())
}

/// Alignment-head checkpoint in the same container format
/// (`affine.<model>.<layer>.W/b`, `m_layer`).
pub fn save_head_checkpoint(head: &AlignmentHead<f32>, dir: &Path) -> Result<()> {
    let tensors: Vec<(String, ArrayD<f32>)> = head
        .named_params()
        .into_iter()
        .map(|p| (p.name, p.value))
        .collect();
    save_tensor_container(dir, "alignment", &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSpecConfig;
    use crate::models::{build_model, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_synth(n_classes: usize, ipc: usize) -> SyntheticSet<f32> {
        let n = n_classes * ipc;
        let images = Array4::from_shape_fn((n, 1, 4, 4), |(i, _, y, x)| {
            (i * 100 + y * 4 + x) as f32 * 0.125 - 3.0
        });
        let labels = (0..n).map(|i| i / ipc).collect();
        SyntheticSet {
            images,
            labels,
            ipc,
            num_classes: n_classes,
        }
    }

    fn toy_ctx() -> (DatasetSpec, CondenseConfig) {
        let spec = DatasetSpec {
            name: "mnist".into(),
            num_classes: 3,
            image_shape: (1, 4, 4),
            mean: vec![0.5],
            std: vec![0.5],
        };
        let cfg = CondenseConfig::for_dataset("mnist");
        (spec, cfg)
    }

    #[test]
    fn artifact_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let synth = toy_synth(3, 2);
        let (spec, cfg) = toy_ctx();
        save_artifact(&synth, &spec, &cfg, dir.path()).unwrap();
        let (loaded, manifest) = load_artifact(dir.path()).unwrap();
        assert_eq!(loaded.images, synth.images);
        assert_eq!(loaded.labels, synth.labels);
        assert_eq!(manifest.shape, [6, 1, 4, 4]);
        // byte-length invariants
        let img_len = std::fs::metadata(dir.path().join(IMAGES_FILE)).unwrap().len();
        assert_eq!(img_len, 6 * 1 * 4 * 4 * 4);
        let lab_len = std::fs::metadata(dir.path().join(LABELS_FILE)).unwrap().len();
        assert_eq!(lab_len, 6 * 8);
    }

    #[test]
    fn truncated_images_detected() {
        let dir = tempfile::tempdir().unwrap();
        let synth = toy_synth(3, 2);
        let (spec, cfg) = toy_ctx();
        save_artifact(&synth, &spec, &cfg, dir.path()).unwrap();
        let img_path = dir.path().join(IMAGES_FILE);
        let bytes = std::fs::read(&img_path).unwrap();
        std::fs::write(&img_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_artifact(dir.path()),
            Err(HmdcError::Integrity(_))
        ));
    }

    #[test]
    fn edited_manifest_shape_detected() {
        let dir = tempfile::tempdir().unwrap();
        let synth = toy_synth(3, 2);
        let (spec, cfg) = toy_ctx();
        save_artifact(&synth, &spec, &cfg, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap();
        let mut manifest: ArtifactManifest = serde_json::from_str(&text).unwrap();
        manifest.shape[0] = 9;
        write_json(&mpath, &manifest).unwrap();
        assert!(load_artifact(dir.path()).is_err());
    }

    #[test]
    fn empty_set_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SyntheticSet::<f32> {
            images: Array4::zeros((0, 1, 4, 4)),
            labels: vec![],
            ipc: 1,
            num_classes: 0,
        };
        let (spec, cfg) = toy_ctx();
        assert!(save_artifact(&synth, &spec, &cfg, dir.path()).is_err());
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let spec = ModelSpec::new(ModelSpecConfig::Convnet { width: 4, depth: 2 }, 3, (1, 8, 8)).unwrap();
        let model: ModelHandle<f32> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model_checkpoint(&model, dir.path()).unwrap();
        let mut other: ModelHandle<f32> =
            build_model(&spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        load_model_checkpoint(&mut other, dir.path()).unwrap();
        for (a, b) in model.params.iter().zip(&other.params) {
            assert_eq!(a.value, b.value);
        }
        // arch mismatch is an integrity error
        let vit_spec =
            ModelSpec::new(ModelSpecConfig::Tinyvit { patch: 4, dim: 8, depth: 2, heads: 2 }, 3, (1, 8, 8))
                .unwrap();
        let mut vit: ModelHandle<f32> =
            build_model(&vit_spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(load_model_checkpoint(&mut vit, dir.path()).is_err());
    }
}
