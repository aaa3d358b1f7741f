//! Run configuration: a strict JSON schema, presets and the canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DassError, Result};
use crate::space::NetConfig;

/// Environment variable consulted when `data_dir` is unset.
pub const DATA_DIR_ENV: &str = "DASS_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10Subset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Keep the searched weights and masks.
    Inherit,
    /// Fresh weights under the searched masks.
    Scratch,
}

/// What the last step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTarget {
    Derived,
    /// The masked supernet with its architecture tables frozen.
    Supernet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    FromPretrain,
    Fresh,
}

/// How often score and architecture updates alternate during pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    PerBatch,
    PerEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub pretrain: usize,
    pub prune: usize,
    pub finetune: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub theta: f64,
    pub score: f64,
    pub finetune: f64,
    pub alpha: f64,
}

/// Every knob of a run. Missing keys take the full-scale defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Cap on each of train, val and test.
    pub subset_size: Option<usize>,
    /// Fraction of the training pool used for weight updates; the rest drives the architecture.
    pub train_val_split: f64,
    /// Synthetic data: samples per split.
    pub synthetic_per_split: usize,
    /// Synthetic data: amplitude of the class pattern.
    pub synthetic_signal: f64,
    /// Synthetic data: pixel noise standard deviation.
    pub synthetic_noise: f64,
    pub data_seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub n_cells: usize,
    pub n_nodes: usize,
    pub init_channels: usize,
    pub stem_multiplier: usize,
    pub include_zero_op: bool,
    pub double_sep_conv: bool,
    pub pruning_ratio: f64,
    pub epochs: Epochs,
    pub batch_size: usize,
    /// Upper bound on mini-batches per epoch, for quick runs.
    pub max_batches_per_epoch: Option<usize>,
    pub lrs: LearningRates,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_momentum: f64,
    pub alpha_weight_decay: f64,
    pub seed: u64,
    pub finetune_mode: FinetuneMode,
    pub finetune_target: FinetuneTarget,
    pub alpha_init_mode: AlphaInit,
    pub alternation: Alternation,
    /// Dense reference size for the compression rate; the run's own dense
    /// derived network after pretraining when unset.
    pub baseline_params: Option<usize>,
    pub augment: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10Subset,
            data_dir: None,
            subset_size: None,
            train_val_split: 0.5,
            synthetic_per_split: 1000,
            synthetic_signal: 0.35,
            synthetic_noise: 0.3,
            data_seed: 0,
            image_size: 32,
            num_classes: 10,
            n_cells: 8,
            n_nodes: 7,
            init_channels: 16,
            stem_multiplier: 3,
            include_zero_op: false,
            double_sep_conv: true,
            pruning_ratio: 0.99,
            epochs: Epochs {
                pretrain: 50,
                prune: 20,
                finetune: 200,
            },
            batch_size: 64,
            max_batches_per_epoch: None,
            lrs: LearningRates {
                theta: 0.025,
                score: 0.1,
                finetune: 0.01,
                alpha: 3e-4,
            },
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_momentum: 0.9,
            alpha_weight_decay: 1e-3,
            seed: 1,
            finetune_mode: FinetuneMode::Inherit,
            finetune_target: FinetuneTarget::Derived,
            alpha_init_mode: AlphaInit::FromPretrain,
            alternation: Alternation::PerBatch,
            baseline_params: None,
            augment: false,
        }
    }
}

impl SearchConfig {
    /// Small CPU profile: two cells with two intermediate nodes, synthetic 8x8 images.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            subset_size: Some(4000),
            synthetic_per_split: 512,
            image_size: 8,
            n_cells: 2,
            n_nodes: 5,
            init_channels: 8,
            epochs: Epochs {
                pretrain: 15,
                prune: 8,
                finetune: 40,
            },
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => Err(DassError::config("preset", format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            image_size: self.image_size,
            num_classes: self.num_classes,
            n_cells: self.n_cells,
            n_nodes: self.n_nodes,
            init_channels: self.init_channels,
            stem_multiplier: self.stem_multiplier,
            include_zero_op: self.include_zero_op,
            double_sep_conv: self.double_sep_conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(DassError::config(f, r));
        if !(0.0..=1.0).contains(&self.pruning_ratio) {
            return bad("pruning_ratio", format!("must lie in [0, 1], got {}", self.pruning_ratio));
        }
        if !(self.train_val_split > 0.0 && self.train_val_split < 1.0) {
            return bad("train_val_split", format!("must lie in (0, 1), got {}", self.train_val_split));
        }
        for (name, v) in [
            ("lrs.theta", self.lrs.theta),
            ("lrs.score", self.lrs.score),
            ("lrs.finetune", self.lrs.finetune),
            ("lrs.alpha", self.lrs.alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("learning rates must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("alpha_momentum", self.alpha_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, format!("must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("alpha_weight_decay", self.alpha_weight_decay),
            ("synthetic_noise", self.synthetic_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch", "must be positive when set".into());
        }
        if self.dataset == DatasetKind::Synthetic && self.synthetic_per_split < self.num_classes {
            return bad(
                "synthetic_per_split",
                format!("need at least one sample per class ({})", self.num_classes),
            );
        }
        if self.dataset == DatasetKind::Cifar10Subset && (self.image_size != 32 || self.num_classes != 10) {
            return bad("image_size", "CIFAR-10 images are 32x32 with 10 classes".into());
        }
        self.net().validate()
    }

    /// Parses a config document. Errors name the offending key or position.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SearchConfig =
            serde_json::from_str(text).map_err(|e| DassError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DassError::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    /// Data directory: the configured one, else the environment variable.
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// The config with environment fallbacks filled in.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.dataset == DatasetKind::Cifar10Subset {
            out.data_dir = self.resolved_data_dir();
        }
        out
    }

    pub fn canonical_json(&self) -> Result<String> {
        // serde_json::Value keeps object keys sorted
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}
