//! Single-file checkpoint: 8-byte magic, `u64` LE manifest length, JSON
//! manifest, then a contiguous little-endian `f64` blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderParams;
use crate::frame::{LengthMode, PerturbationBank};
use crate::linalg::Mat;
use crate::model::{Adam, Model};
use crate::pretrain::PretrainState;
use crate::prototypes::RiemannianPrototype;

pub const MAGIC: &[u8; 8] = b"MGLUECK1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {position}: {msg}")]
    Corrupt { position: usize, msg: String },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

fn corrupt(position: usize, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        position,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Finished epochs.
    pub epoch: usize,
    pub seed: u64,
    pub length_mode: LengthMode,
    pub k_perturb: usize,
    pub dropout: f64,
    pub projection_seed: u64,
    /// Prototype update counts by domain.
    pub prototypes: BTreeMap<String, u64>,
    adam: AdamMeta,
    pub tensors: Vec<TensorEntry>,
}

/// Training state plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: PretrainState,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let m = &self.state.model;
        let mut out = vec![
            ("encoder.w1".to_string(), &m.encoder.w1),
            ("encoder.b1".into(), &m.encoder.b1),
            ("encoder.w2".into(), &m.encoder.w2),
            ("encoder.b2".into(), &m.encoder.b2),
            ("bank.p".into(), &m.bank.p),
        ];
        for (raw, p) in &m.projections {
            out.push((format!("projection.{raw}"), p));
        }
        for (name, p) in &m.prototypes {
            out.push((format!("proto.{name}.log_g"), &p.log_g));
        }
        for (i, (mm, vv)) in self.state.adam.m.iter().zip(&self.state.adam.v).enumerate() {
            out.push((format!("adam.m.{i}"), mm));
            out.push((format!("adam.v.{i}"), vv));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.state.model;
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, shape: (usize, usize), values: &[f64]| {
            let offset = blob.len();
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape,
                offset,
                length: blob.len() - offset,
            });
        };
        for (name, t) in self.tensors() {
            push(name, t.shape(), t.as_slice());
        }
        for (name, p) in &m.prototypes {
            push(format!("proto.{name}.z"), (1, p.z.len()), &p.z);
        }
        let a = &self.state.adam;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.state.epoch,
            seed: self.seed,
            length_mode: m.length_mode,
            k_perturb: m.bank.k,
            dropout: m.encoder.dropout,
            projection_seed: m.projection_seed,
            prototypes: m
                .prototypes
                .iter()
                .map(|(k, p)| (k.clone(), p.update_count))
                .collect(),
            adam: AdamMeta {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            },
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    /// Parses the header and manifest and checks that the tensors tile the
    /// blob exactly.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
        if bytes.len() < HEADER {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = HEADER
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(
                    bytes.len(),
                    format!("manifest of {len} bytes runs past end of file"),
                )
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..end]).map_err(|e| {
            // serde_json reports line/column; the manifest is a single line
            corrupt(
                HEADER + e.column().saturating_sub(1),
                format!("manifest: {e}"),
            )
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let blob = &bytes[end..];
        let mut spans: Vec<&TensorEntry> = manifest.tensors.iter().collect();
        spans.sort_by_key(|t| t.offset);
        let mut cursor = 0;
        for t in spans {
            if t.offset != cursor {
                return Err(corrupt(
                    end + cursor,
                    format!(
                        "tensor `{}` starts at {} instead of {cursor}",
                        t.name, t.offset
                    ),
                ));
            }
            if t.length != t.shape.0 * t.shape.1 * 8 {
                return Err(corrupt(
                    end + t.offset,
                    format!(
                        "tensor `{}` length {} does not match shape",
                        t.name, t.length
                    ),
                ));
            }
            cursor += t.length;
        }
        if cursor != blob.len() {
            return Err(corrupt(
                end + cursor.min(blob.len()),
                format!("blob has {} bytes, manifest covers {cursor}", blob.len()),
            ));
        }
        Ok((manifest, blob))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (manifest, blob) = Self::read_manifest(bytes)?;
        let base = bytes.len() - blob.len();
        let table: BTreeMap<&str, &TensorEntry> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let get = |name: &str| -> Result<Mat, CheckpointError> {
            let t = table
                .get(name)
                .ok_or_else(|| corrupt(base, format!("missing tensor `{name}`")))?;
            let data = blob[t.offset..t.offset + t.length]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Mat::from_vec(t.shape.0, t.shape.1, data))
        };
        let encoder = EncoderParams {
            w1: get("encoder.w1")?,
            b1: get("encoder.b1")?,
            w2: get("encoder.w2")?,
            b2: get("encoder.b2")?,
            dropout: manifest.dropout,
        };
        let bank = PerturbationBank {
            p: get("bank.p")?,
            k: manifest.k_perturb,
        };
        let mut projections = BTreeMap::new();
        for t in &manifest.tensors {
            if let Some(raw) = t.name.strip_prefix("projection.") {
                let raw: usize = raw.parse().map_err(|_| {
                    corrupt(base + t.offset, format!("bad tensor name `{}`", t.name))
                })?;
                projections.insert(raw, get(&t.name)?);
            }
        }
        let mut prototypes = BTreeMap::new();
        for (name, &count) in &manifest.prototypes {
            let z = get(&format!("proto.{name}.z"))?.into_vec();
            let log_g = get(&format!("proto.{name}.log_g"))?;
            prototypes.insert(
                name.clone(),
                RiemannianPrototype {
                    domain: name.clone(),
                    z,
                    log_g,
                    update_count: count,
                },
            );
        }
        let n_adam = manifest
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("adam.m."))
            .count();
        let a = &manifest.adam;
        let adam = Adam {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            m: (0..n_adam)
                .map(|i| get(&format!("adam.m.{i}")))
                .collect::<Result<_, _>>()?,
            v: (0..n_adam)
                .map(|i| get(&format!("adam.v.{i}")))
                .collect::<Result<_, _>>()?,
        };
        let model = Model {
            encoder,
            bank,
            projections,
            prototypes,
            length_mode: manifest.length_mode,
            projection_seed: manifest.projection_seed,
        };
        Ok(Checkpoint {
            state: PretrainState {
                model,
                adam,
                epoch: manifest.epoch,
            },
            config: manifest.config,
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Human-readable manifest summary.
pub fn describe(manifest: &Manifest) -> String {
    let mut s = format!(
        "format_version: {}\nepoch: {}\nseed: {}\nconfig_hash: {}\nprototypes: {}\ntensors:\n",
        manifest.format_version,
        manifest.epoch,
        manifest.seed,
        manifest.config_hash,
        manifest
            .prototypes
            .keys()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ")
    );
    for t in &manifest.tensors {
        s.push_str(&format!(
            "  {:<28} {:>5}x{:<5} @{}\n",
            t.name, t.shape.0, t.shape.1, t.offset
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PretrainConfig;
    use crate::graph::{gen_synthetic, SyntheticSpec};
    use crate::pretrain::{init_state, metrics_csv, pretrain, run_pretrain};

    fn setup() -> (Vec<crate::graph::DomainDataset>, PretrainConfig) {
        let mut spec = SyntheticSpec::reference_suite();
        spec.domains.truncate(2);
        for d in &mut spec.domains {
            d.records = 8;
            d.nodes = (4, 6);
        }
        let cfg = PretrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            manifold_dim: 3,
            k_perturb: 4,
            knn_k: 2,
            n_triangle_samples: 4,
            feature_dim: 6,
            hidden_dim: 8,
            embed_dim: 5,
            ..PretrainConfig::default()
        };
        (gen_synthetic(&spec, 2).unwrap(), cfg)
    }

    fn wrap(state: PretrainState, cfg: &PretrainConfig) -> Checkpoint {
        let config = serde_json::to_value(cfg).unwrap();
        Checkpoint {
            state,
            config_hash: crate::config::config_hash(&config),
            config,
            seed: cfg.seed,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, cfg) = setup();
        let (state, _) = pretrain(
            &ds,
            &PretrainConfig {
                epochs: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        let ck = wrap(state, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn resume_from_bytes_matches_uninterrupted_run() {
        let (ds, cfg) = setup();
        let (full, full_rows) = pretrain(&ds, &cfg).unwrap();
        let mut state = init_state(&ds, &cfg);
        let mut rows = run_pretrain(&ds, &cfg, &mut state, Some(1), &mut |_, _| {}).unwrap();
        let mut restored = Checkpoint::from_bytes(&wrap(state, &cfg).to_bytes())
            .unwrap()
            .state;
        rows.extend(run_pretrain(&ds, &cfg, &mut restored, None, &mut |_, _| {}).unwrap());
        assert_eq!(metrics_csv(&rows), metrics_csv(&full_rows));
        assert_eq!(restored, full);
    }

    #[test]
    fn offsets_tile_the_blob() {
        let (ds, cfg) = setup();
        let ck = wrap(init_state(&ds, &cfg), &cfg);
        let bytes = ck.to_bytes();
        let (manifest, blob) = Checkpoint::read_manifest(&bytes).unwrap();
        let total: usize = manifest.tensors.iter().map(|t| t.length).sum();
        assert_eq!(total, blob.len());
        let text = describe(&manifest);
        for name in ["encoder.w1", "bank.p", "adam.m.0", "projection.16"] {
            assert!(text.contains(name), "{text}");
        }
    }

    #[test]
    fn truncation_and_garbage_are_reported() {
        let (ds, cfg) = setup();
        let bytes = wrap(init_state(&ds, &cfg), &cfg).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..40]).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Corrupt { position: 0, .. })
        ));
        let mut bad = bytes;
        bad[16] = b'#';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(
            matches!(err, CheckpointError::Corrupt { position: 16, .. }),
            "{err}"
        );
    }
}
