//! Seeded multi-domain synthetic graph suites.
//!
//! Each domain draws graphs from one structural family. Labels shape both
//! the structure (number of communities, tree bushiness, clique count) and
//! the node features (a class-conditional mean on top of a domain-wide
//! offset), so structure and features both carry class signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ego_sample, link_sample, Adjacency, DataError, DomainDataset, GraphRecord, Task};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    SbmCommunity,
    RandomTree,
    DenseCliqueClusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub family: Family,
    /// Inclusive node-count range per record (graph task).
    #[serde(default = "defaults::nodes")]
    pub nodes: (usize, usize),
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::records")]
    pub records: usize,
    #[serde(default)]
    pub task: Task,
    /// Distance of each class mean from the domain centre.
    #[serde(default = "defaults::class_mean_offset")]
    pub class_mean_offset: f64,
    /// Shared per-coordinate standard deviation of node features.
    #[serde(default = "defaults::feature_std")]
    pub feature_std: f64,
    /// Norm of the domain centre.
    #[serde(default = "defaults::domain_offset")]
    pub domain_offset: f64,
    /// Size of the source graph for node and link tasks.
    #[serde(default = "defaults::graph_nodes")]
    pub graph_nodes: usize,
    #[serde(default = "defaults::hops")]
    pub hops: usize,
    #[serde(default = "defaults::fanout")]
    pub fanout: usize,
}

mod defaults {
    pub fn nodes() -> (usize, usize) {
        (10, 20)
    }
    pub fn feature_dim() -> usize {
        16
    }
    pub fn classes() -> usize {
        3
    }
    pub fn records() -> usize {
        60
    }
    pub fn class_mean_offset() -> f64 {
        1.0
    }
    pub fn feature_std() -> f64 {
        1.0
    }
    pub fn domain_offset() -> f64 {
        2.0
    }
    pub fn graph_nodes() -> usize {
        200
    }
    pub fn hops() -> usize {
        2
    }
    pub fn fanout() -> usize {
        10
    }
}

impl DomainSpec {
    pub fn new(name: &str, family: Family) -> Self {
        DomainSpec {
            name: name.to_string(),
            family,
            nodes: defaults::nodes(),
            feature_dim: defaults::feature_dim(),
            classes: defaults::classes(),
            records: defaults::records(),
            task: Task::Graph,
            class_mean_offset: defaults::class_mean_offset(),
            feature_std: defaults::feature_std(),
            domain_offset: defaults::domain_offset(),
            graph_nodes: defaults::graph_nodes(),
            hops: defaults::hops(),
            fanout: defaults::fanout(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: &str| Err(DataError::Spec(format!("domain `{}`: {msg}", self.name)));
        if self.name.is_empty() {
            return fail("empty name");
        }
        if self.nodes.0 == 0 || self.nodes.0 > self.nodes.1 {
            return fail("`nodes` must be a range [min, max] with 1 <= min <= max");
        }
        if self.feature_dim == 0 {
            return fail("`feature_dim` must be positive");
        }
        if self.classes == 0 {
            return fail("`classes` must be positive");
        }
        if self.records == 0 {
            return fail("`records` must be positive");
        }
        if !(self.feature_std >= 0.0) {
            return fail("`feature_std` must be non-negative");
        }
        if self.task != Task::Graph && self.graph_nodes < 2 {
            return fail("`graph_nodes` must be at least 2");
        }
        Ok(())
    }
}

impl SyntheticSpec {
    /// Three graph-classification domains, one per structural family.
    pub fn reference_suite() -> Self {
        SyntheticSpec {
            domains: vec![
                DomainSpec::new("sbm", Family::SbmCommunity),
                DomainSpec::new("tree", Family::RandomTree),
                DomainSpec::new("clique", Family::DenseCliqueClusters),
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::Spec(e.to_string()))
    }
}

/// Generates every domain of `spec`. A pure function of `(spec, seed)`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainDataset>, DataError> {
    if spec.domains.is_empty() {
        return Err(DataError::Spec("no domains".into()));
    }
    let mut names: Vec<&str> = spec.domains.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(DataError::Spec("duplicate domain names".into()));
    }
    spec.domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.validate()?;
            generate_domain(d, rng::derive_seed(seed, &[rng::tag("domain"), i as u64]))
        })
        .collect()
}

struct FeatureModel {
    center: Vec<f64>,
    class_dirs: Vec<Vec<f64>>,
    offset: f64,
    std: f64,
}

impl FeatureModel {
    fn new(d: &DomainSpec, rng: &mut ChaCha8Rng) -> Self {
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..d.feature_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let center = unit(rng).into_iter().map(|x| x * d.domain_offset).collect();
        let class_dirs = (0..d.classes).map(|_| unit(rng)).collect();
        FeatureModel {
            center,
            class_dirs,
            offset: d.class_mean_offset,
            std: d.feature_std,
        }
    }

    fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.class_dirs[class % self.class_dirs.len()])
            .map(|(c, dir)| {
                let noise: f64 = StandardNormal.sample(rng);
                c + self.offset * dir + self.std * noise
            })
            .collect()
    }
}

/// Structure of one graph: edges and a per-node group used for node labels.
struct Structure {
    edges: Vec<(usize, usize)>,
    groups: Vec<usize>,
}

fn sbm(n: usize, blocks: usize, p_in: f64, p_out: f64, rng: &mut ChaCha8Rng) -> Structure {
    let groups: Vec<usize> = (0..n).map(|i| i % blocks).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if groups[a] == groups[b] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    Structure { edges, groups }
}

/// Random recursive tree; node `i` attaches to one of the `window` nodes
/// preceding it, so small windows give long chains and large ones bushes.
fn tree(n: usize, window: usize, rng: &mut ChaCha8Rng) -> Structure {
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut depth = vec![0usize; n];
    for i in 1..n {
        let lo = i.saturating_sub(window);
        let parent = rng.random_range(lo..i);
        depth[i] = depth[parent] + 1;
        edges.push((parent, i));
    }
    Structure {
        edges,
        groups: depth,
    }
}

fn cliques(n: usize, clusters: usize, p_in: f64, rng: &mut ChaCha8Rng) -> Structure {
    let clusters = clusters.min(n).max(1);
    let groups: Vec<usize> = (0..n).map(|i| i % clusters).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if groups[a] == groups[b] && rng.random::<f64>() < p_in {
                edges.push((a, b));
            }
        }
    }
    for c in 1..clusters {
        // bridge the first members of consecutive clusters
        edges.push((c - 1, c));
    }
    Structure { edges, groups }
}

fn graph_structure(family: Family, n: usize, class: usize, rng: &mut ChaCha8Rng) -> Structure {
    match family {
        Family::SbmCommunity => sbm(n, 2 + class, 0.6, 0.05, rng),
        Family::RandomTree => tree(n, 1 + 2 * class, rng),
        Family::DenseCliqueClusters => cliques(n, 2 + class, 0.9, rng),
    }
}

fn source_graph(d: &DomainSpec, rng: &mut ChaCha8Rng) -> (Structure, Vec<i64>) {
    let n = d.graph_nodes;
    let s = match d.family {
        Family::SbmCommunity => sbm(
            n,
            d.classes,
            (8.0 / n as f64).min(1.0),
            (0.5 / n as f64).min(1.0),
            rng,
        ),
        Family::RandomTree => tree(n, 3, rng),
        Family::DenseCliqueClusters => cliques(n, d.classes * 4, 0.9, rng),
    };
    let labels = s.groups.iter().map(|&g| (g % d.classes) as i64).collect();
    (s, labels)
}

fn generate_domain(d: &DomainSpec, seed: u64) -> Result<DomainDataset, DataError> {
    let mut rng = rng::stream(seed, &[rng::tag("features")]);
    let features = FeatureModel::new(d, &mut rng);
    let mut ds = match d.task {
        Task::Graph => {
            let records = (0..d.records)
                .map(|i| {
                    let mut rng = rng::stream(seed, &[rng::tag("record"), i as u64]);
                    let class = i % d.classes;
                    let n = rng.random_range(d.nodes.0..=d.nodes.1);
                    let s = graph_structure(d.family, n, class, &mut rng);
                    GraphRecord {
                        num_nodes: n,
                        edges: s.edges,
                        features: (0..n).map(|_| features.sample(class, &mut rng)).collect(),
                        label: Some(class as i64),
                        domain: d.name.clone(),
                    }
                })
                .collect();
            DomainDataset::new(d.name.clone(), records, Task::Graph)?
        }
        Task::Node | Task::Link => {
            let mut grng = rng::stream(seed, &[rng::tag("source")]);
            let (s, labels) = source_graph(d, &mut grng);
            let n = d.graph_nodes;
            let graph = GraphRecord {
                num_nodes: n,
                edges: s.edges,
                features: labels
                    .iter()
                    .map(|&y| features.sample(y as usize, &mut grng))
                    .collect(),
                label: None,
                domain: d.name.clone(),
            };
            if d.task == Task::Node {
                let centers: Option<Vec<usize>> = (d.records < n).then(|| {
                    let mut c = rand::seq::index::sample(&mut grng, n, d.records).into_vec();
                    c.sort_unstable();
                    c
                });
                ego_sample(&graph, &labels, centers.as_deref(), d.hops, d.fanout, seed)?
            } else {
                let pairs = link_pairs(&graph, d.records, &mut grng);
                link_sample(&graph, &pairs, d.hops, d.fanout, seed)?
            }
        }
    };
    ds.num_classes = match d.task {
        Task::Link => 2,
        _ => d.classes,
    };
    Ok(ds)
}

/// Half existing edges (label 1), half sampled non-edges (label 0).
fn link_pairs(graph: &GraphRecord, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, i64)> {
    let adj = Adjacency::of(graph);
    let edges = graph.canonical_edges();
    let n = graph.num_nodes;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        if i % 2 == 0 && !edges.is_empty() {
            let (a, b) = edges[rng.random_range(0..edges.len())];
            pairs.push((a, b, 1));
        } else {
            loop {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b && !adj.has_edge(a, b) {
                    pairs.push((a, b, 0));
                    break;
                }
            }
        }
    }
    pairs
}
