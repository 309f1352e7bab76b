//! Run configuration: strict JSON parsing (unknown keys are fatal) with
//! fully-defaulted echo for manifests.

use crate::error::{HmdcError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Architecture and size of one model in the heterogeneous pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpecConfig {
    Convnet {
        #[serde(default = "d_convnet_width")]
        width: usize,
        #[serde(default = "d_convnet_depth")]
        depth: usize,
    },
    Tinyvit {
        #[serde(default = "d_vit_patch")]
        patch: usize,
        #[serde(default = "d_vit_dim")]
        dim: usize,
        #[serde(default = "d_vit_depth")]
        depth: usize,
        #[serde(default = "d_vit_heads")]
        heads: usize,
    },
}

fn d_convnet_width() -> usize {
    128
}
fn d_convnet_depth() -> usize {
    3
}
fn d_vit_patch() -> usize {
    4
}
fn d_vit_dim() -> usize {
    64
}
fn d_vit_depth() -> usize {
    4
}
fn d_vit_heads() -> usize {
    4
}

impl ModelSpecConfig {
    pub fn default_convnet() -> Self {
        ModelSpecConfig::Convnet {
            width: d_convnet_width(),
            depth: d_convnet_depth(),
        }
    }

    pub fn default_tinyvit() -> Self {
        ModelSpecConfig::Tinyvit {
            patch: d_vit_patch(),
            dim: d_vit_dim(),
            depth: d_vit_depth(),
            heads: d_vit_heads(),
        }
    }

    pub fn arch_name(&self) -> &'static str {
        match self {
            ModelSpecConfig::Convnet { .. } => "convnet",
            ModelSpecConfig::Tinyvit { .. } => "tinyvit",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset cache directory; `HMDC_DATA_DIR` overrides this.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

/// All knobs of one condensation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondenseConfig {
    pub dataset: String,
    #[serde(default = "d_ipc")]
    pub ipc: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_inner_loops")]
    pub inner_loops: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr_model")]
    pub lr_model1: f64,
    #[serde(default = "d_lr_model")]
    pub lr_model2: f64,
    #[serde(default = "d_lr_alignment")]
    pub lr_alignment: f64,
    #[serde(default = "d_lr_images")]
    pub lr_images: f64,
    #[serde(default = "d_momentum_images")]
    pub momentum_images: f64,
    #[serde(default = "d_true")]
    pub enable_gbm: bool,
    #[serde(default = "d_true")]
    pub enable_md: bool,
    #[serde(default = "d_sample_every")]
    pub sample_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "ModelSpecConfig::default_convnet")]
    pub model1: ModelSpecConfig,
    #[serde(default = "ModelSpecConfig::default_tinyvit")]
    pub model2: ModelSpecConfig,
    /// Emit a metrics record every this many image steps.
    #[serde(default = "d_log_every")]
    pub log_every: usize,
}

fn d_ipc() -> usize {
    10
}
fn d_iterations() -> usize {
    100
}
fn d_inner_loops() -> usize {
    100
}
fn d_batch_size() -> usize {
    128
}
fn d_lr_model() -> f64 {
    0.001
}
fn d_lr_alignment() -> f64 {
    0.01
}
fn d_lr_images() -> f64 {
    0.01
}
fn d_momentum_images() -> f64 {
    0.5
}
fn d_true() -> bool {
    true
}
fn d_sample_every() -> usize {
    10
}
fn d_log_every() -> usize {
    1
}

impl CondenseConfig {
    pub fn for_dataset(name: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "dataset": name }))
            .expect("minimal config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CondenseConfig =
            serde_json::from_str(text).map_err(|e| HmdcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HmdcError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("ipc", self.ipc),
            ("iterations", self.iterations),
            ("inner_loops", self.inner_loops),
            ("batch_size", self.batch_size),
            ("sample_every", self.sample_every),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(HmdcError::Config(format!("{name} must be >= 1")));
            }
        }
        let positive_rates = [
            ("lr_model1", self.lr_model1),
            ("lr_model2", self.lr_model2),
            ("lr_alignment", self.lr_alignment),
            ("lr_images", self.lr_images),
        ];
        for (name, v) in positive_rates {
            if !(v > 0.0) {
                return Err(HmdcError::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum_images) {
            return Err(HmdcError::Config("momentum_images must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cache directory resolution: `HMDC_DATA_DIR` env, then `data.cache_dir`,
    /// then `./data`.
    pub fn resolve_cache_dir(&self) -> PathBuf {
        resolve_cache_dir(self.data.cache_dir.as_deref())
    }
}

pub fn resolve_cache_dir(config_dir: Option<&Path>) -> PathBuf {
    if let Ok(env_dir) = std::env::var("HMDC_DATA_DIR") {
        if !env_dir.is_empty() {
            return PathBuf::from(env_dir);
        }
    }
    config_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("data"))
}
