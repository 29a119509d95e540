//! Graph records, datasets and loaders.

mod batch;
mod ego;
mod io;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, GraphBatch};
pub use ego::{ego_nodes, ego_sample, induced_subgraph, link_sample, Adjacency};
pub use io::{load_jsonl, load_jsonl_with, parse_jsonl, save_jsonl, to_jsonl};
pub use synth::{gen_synthetic, DomainSpec, Family, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid `{field}`: {msg}")]
    Invalid {
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("dataset `{name}`: {msg}")]
    Dataset { name: String, msg: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Link,
    #[default]
    Graph,
}

/// One attributed, undirected graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Vec<Vec<f64>>,
    pub label: Option<i64>,
    pub domain: String,
}

impl GraphRecord {
    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Checks structural invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.num_nodes == 0 {
            return Err(("num_nodes", "must be at least 1".into()));
        }
        for &(a, b) in &self.edges {
            if a >= self.num_nodes || b >= self.num_nodes {
                return Err((
                    "edges",
                    format!("edge ({a},{b}) out of range for {} nodes", self.num_nodes),
                ));
            }
            if a == b {
                return Err(("edges", format!("self-loop on node {a}")));
            }
        }
        if self.features.len() != self.num_nodes {
            return Err((
                "features",
                format!("{} rows for {} nodes", self.features.len(), self.num_nodes),
            ));
        }
        let f = self.feature_dim();
        if let Some(i) = self.features.iter().position(|r| r.len() != f) {
            return Err((
                "features",
                format!(
                    "row {i} has {} columns, expected {f}",
                    self.features[i].len()
                ),
            ));
        }
        if self.features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(("features", "non-finite value".into()));
        }
        Ok(())
    }

    /// Undirected, de-duplicated edge list with `a < b`.
    pub fn canonical_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Records of one domain sharing a feature space and a task.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub records: Vec<GraphRecord>,
    pub task: Task,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Edge set of the source graph when the records are ego-graphs of its
    /// nodes (record `i` centred on node `i`).
    pub global_edges: Option<Vec<(usize, usize)>>,
}

impl DomainDataset {
    /// Builds a dataset and checks that records agree on domain and width.
    pub fn new(
        name: impl Into<String>,
        records: Vec<GraphRecord>,
        task: Task,
    ) -> Result<Self, DataError> {
        let name = name.into();
        let feature_dim = records.first().map_or(0, GraphRecord::feature_dim);
        for (i, r) in records.iter().enumerate() {
            if r.domain != name {
                return Err(DataError::Dataset {
                    name: name.clone(),
                    msg: format!("record {i} has domain `{}`", r.domain),
                });
            }
            if r.feature_dim() != feature_dim {
                return Err(DataError::Dataset {
                    name: name.clone(),
                    msg: format!(
                        "record {i} has feature_dim {}, expected {feature_dim}",
                        r.feature_dim()
                    ),
                });
            }
            r.validate().map_err(|(field, msg)| DataError::Dataset {
                name: name.clone(),
                msg: format!("record {i}: invalid `{field}`: {msg}"),
            })?;
        }
        let num_classes = records
            .iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| (m + 1).max(0) as usize);
        Ok(DomainDataset {
            name,
            records,
            task,
            num_classes,
            feature_dim,
            global_edges: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
