//! Run configuration. Every struct rejects unknown keys and fills missing
//! ones from its defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frame::LengthMode;
use crate::graph::{load_jsonl_with, DataError, DomainDataset, Task};
use crate::model::ModelDims;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: `{field}` {msg}")]
    Invalid { field: &'static str, msg: String },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub local: f64,
    pub proto: f64,
    pub holo: f64,
    pub curv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            local: 1.0,
            proto: 1.0,
            holo: 1.0,
            curv: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Epochs before the prototype loss switches on.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub manifold_dim: usize,
    pub k_perturb: usize,
    pub knn_k: usize,
    pub n_triangle_samples: usize,
    pub temperature: f64,
    pub beta_ema: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Width the raw features are projected to.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub edge_drop: f64,
    pub feature_mask: f64,
    pub length_mode: LengthMode,
    /// Fill `wall_ms`; off keeps metrics files reproducible.
    pub record_wall_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            warmup_epochs: 5,
            batch_size: 16,
            learning_rate: 1e-4,
            dropout: 0.1,
            manifold_dim: 32,
            k_perturb: 15,
            knn_k: 15,
            n_triangle_samples: 32,
            temperature: 1.0,
            beta_ema: 0.99,
            seed: 0,
            loss_weights: LossWeights::default(),
            feature_dim: 128,
            hidden_dim: 512,
            embed_dim: 512,
            edge_drop: 0.2,
            feature_mask: 0.2,
            length_mode: LengthMode::TangentNorm,
            record_wall_time: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("manifold_dim", self.manifold_dim),
            ("k_perturb", self.k_perturb),
            ("knn_k", self.knn_k),
            ("n_triangle_samples", self.n_triangle_samples),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.manifold_dim > self.embed_dim {
            return Err(invalid(
                "manifold_dim",
                format!("{} exceeds embed_dim {}", self.manifold_dim, self.embed_dim),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.beta_ema > 0.0 && self.beta_ema < 1.0) {
            return Err(invalid("beta_ema", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("dropout", self.dropout),
            ("edge_drop", self.edge_drop),
            ("feature_mask", self.feature_mask),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(field, "must lie in [0, 1)"));
            }
        }
        let w = self.loss_weights;
        for (field, v) in [
            ("loss_weights.local", w.local),
            ("loss_weights.proto", w.proto),
            ("loss_weights.holo", w.holo),
            ("loss_weights.curv", w.curv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            manifold_dim: self.manifold_dim,
            k_perturb: self.k_perturb,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the gluing losses in the adaptation objective.
    pub lambda: f64,
    pub shots: usize,
    /// Nearest prototypes in the transfer graph.
    pub k_prototypes: usize,
    pub gate_hidden: usize,
    /// Feed the prompted `z` instead of the pre-trained one to the head.
    pub use_adapted_z: bool,
    /// Share of the non-shot records used for validation; the rest is test.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 300,
            learning_rate: 1e-3,
            lambda: 1.0,
            shots: 5,
            k_prototypes: 2,
            gate_hidden: 16,
            use_adapted_z: false,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("epochs", self.epochs),
            ("shots", self.shots),
            ("k_prototypes", self.k_prototypes),
            ("gate_hidden", self.gate_hidden),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A dataset file and the task its labels describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default)]
    pub task: Task,
    /// JSON edge list of the source graph when records are its ego-graphs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_edges: Option<PathBuf>,
}

impl DatasetSource {
    pub fn new(path: impl Into<PathBuf>, task: Task) -> Self {
        DatasetSource {
            path: path.into(),
            task,
            global_edges: None,
        }
    }

    pub fn load(&self) -> Result<DomainDataset, DataError> {
        let mut ds = load_jsonl_with(&self.path, self.task)?;
        if let Some(p) = &self.global_edges {
            let io = |source| DataError::Io {
                path: p.display().to_string(),
                source,
            };
            let text = std::fs::read_to_string(p).map_err(io)?;
            let edges: Vec<(usize, usize)> =
                serde_json::from_str(&text).map_err(|e| DataError::Parse {
                    line: e.line(),
                    msg: e.to_string(),
                })?;
            if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a.max(b) >= ds.len()) {
                return Err(DataError::Dataset {
                    name: ds.name.clone(),
                    msg: format!(
                        "global edge ({a},{b}) out of range for {} records",
                        ds.len()
                    ),
                });
            }
            ds.global_edges = Some(edges);
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    /// Pre-training domains.
    pub datasets: Vec<DatasetSource>,
    /// Held-out domain for `adapt`, `gtm` and `export-embeddings`.
    pub target: Option<DatasetSource>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            datasets: Vec::new(),
            target: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pretrain.validate()?;
        self.adapt.validate()
    }
}

/// Sorted-key JSON with shortest round-trip float formatting.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is a BTreeMap, so going through Value sorts keys
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
