//! Pipeline configuration: a JSON file plus command-line overrides.

use gapa_core::error::{GapaError, Result};
use gapa_core::inducing::InducingMethod;
use gapa_core::propagate::AttentionVariant;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Kmeanspp,
    Fps,
}

impl MethodChoice {
    pub fn to_core(self) -> InducingMethod {
        match self {
            Self::Kmeanspp => InducingMethod::KMeansPp,
            Self::Fps => InducingMethod::FarthestPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexChoice {
    Flat,
    Ivf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    /// Laplace bridge probabilities (small class counts).
    Laplace,
    /// Monte-Carlo averaged softmax probabilities (large vocabularies).
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantChoice {
    A,
    B,
}

impl VariantChoice {
    pub fn to_core(self) -> AttentionVariant {
        match self {
            Self::A => AttentionVariant::A,
            Self::B => AttentionVariant::B,
        }
    }
}

/// Noise-head fitting options (regression only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseHeadOptions {
    pub enabled: bool,
    /// Hidden width (None = linear head).
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_nh_epochs")]
    pub epochs: usize,
    #[serde(default = "default_nh_lr")]
    pub lr: f64,
    /// Which layer's incoming state feeds the head; defaults to the final
    /// pre-logit hidden state (input of the last linear layer).
    #[serde(default)]
    pub feature_layer: Option<usize>,
}

fn default_nh_epochs() -> usize {
    800
}

fn default_nh_lr() -> f64 {
    0.1
}

impl Default for NoiseHeadOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            hidden: None,
            epochs: default_nh_epochs(),
            lr: default_nh_lr(),
            feature_layer: None,
        }
    }
}

/// Everything one end-to-end run needs. Paths are resolved relative to the
/// config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub network: PathBuf,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    /// Identifier mixed into artifact fingerprints; guards stale caches.
    pub dataset_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Attachment points to use; None = every point the network declares.
    #[serde(default)]
    pub gapa_layers: Option<Vec<usize>>,
    /// Inducing-set size; None = min(cache rows, 20000).
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_method")]
    pub method: MethodChoice,
    #[serde(default = "default_index")]
    pub index: IndexChoice,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_head")]
    pub head: HeadChoice,
    #[serde(default = "default_variant")]
    pub variant: VariantChoice,
    #[serde(default)]
    pub noise_head: NoiseHeadOptions,
    /// Logit samples for the MC entropy decomposition.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Top-k logits kept for the MC decomposition.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_k() -> usize {
    50
}

fn default_method() -> MethodChoice {
    MethodChoice::Kmeanspp
}

fn default_index() -> IndexChoice {
    IndexChoice::Flat
}

fn default_jitter() -> f64 {
    1e-6
}

fn default_head() -> HeadChoice {
    HeadChoice::Laplace
}

fn default_variant() -> VariantChoice {
    VariantChoice::A
}

fn default_mc_samples() -> usize {
    512
}

fn default_top_k() -> usize {
    512
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jitter: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub variant: Option<VariantChoice>,
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| GapaError::InvalidParameter {
                what: format!("config {}: {e}", path.display()),
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.network = resolve(base, &cfg.network);
        cfg.train_data = resolve(base, &cfg.train_data);
        cfg.test_data = resolve(base, &cfg.test_data);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(j) = overrides.jitter {
            cfg.jitter = j;
        }
        if let Some(k) = overrides.k {
            cfg.k = k;
        }
        if overrides.m.is_some() {
            cfg.m = overrides.m;
        }
        if let Some(v) = overrides.variant {
            cfg.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GapaError::InvalidParameter {
                what: "k must be >= 1".into(),
            });
        }
        if let Some(m) = self.m {
            if m < self.k {
                return Err(GapaError::InvalidParameter {
                    what: format!("M = {m} must be >= K = {}", self.k),
                });
            }
        }
        if !(self.jitter > 0.0) {
            return Err(GapaError::InvalidParameter {
                what: format!("jitter must be > 0, got {}", self.jitter),
            });
        }
        if self.mc_samples == 0 || self.top_k == 0 {
            return Err(GapaError::InvalidParameter {
                what: "mc_samples and top_k must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn cache_path(&self, layer: usize) -> PathBuf {
        self.out_dir.join(format!("cache_layer{layer}.gapacache"))
    }

    pub fn inducing_path(&self, layer: usize) -> PathBuf {
        self.out_dir.join(format!("inducing_layer{layer}.gapaind"))
    }

    pub fn model_manifest_path(&self) -> PathBuf {
        self.out_dir.join("gapa_model.json")
    }

    pub fn network_with_head_path(&self) -> PathBuf {
        self.out_dir.join("network_with_head.gapanet")
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.out_dir.join("predictions.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.json")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
