//! Ego-graph extraction for node- and link-level tasks.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DomainDataset, GraphRecord, Task};
use crate::rng;

/// Sorted neighbour lists of an undirected graph.
#[derive(Debug, Clone)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Adjacency { neighbors }
    }

    pub fn of(record: &GraphRecord) -> Self {
        Adjacency::new(record.num_nodes, &record.edges)
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }
}

/// Nodes of the sampled `hops`-hop neighbourhood of `roots`, in discovery
/// order with the roots first. Each frontier node contributes at most
/// `fanout` neighbours drawn without replacement.
pub fn ego_nodes(
    adj: &Adjacency,
    roots: &[usize],
    hops: usize,
    fanout: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();
    for &r in roots {
        if seen.insert(r) {
            order.push(r);
        }
    }
    let mut frontier = order.clone();
    for _ in 0..hops {
        let mut next = Vec::new();
        for &v in &frontier {
            let mut nbrs = adj.neighbors(v).to_vec();
            nbrs.shuffle(rng);
            for &u in nbrs.iter().take(fanout) {
                if seen.insert(u) {
                    order.push(u);
                    next.push(u);
                }
            }
        }
        frontier = next;
    }
    order
}

/// Subgraph induced by `nodes`, relabelled to `0..nodes.len()` in order.
pub fn induced_subgraph(
    graph: &GraphRecord,
    adj: &Adjacency,
    nodes: &[usize],
    label: Option<i64>,
    skip_edge: Option<(usize, usize)>,
) -> GraphRecord {
    let index: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges = Vec::new();
    for (i, &v) in nodes.iter().enumerate() {
        for &u in adj.neighbors(v) {
            let Some(&j) = index.get(&u) else { continue };
            if j <= i {
                continue;
            }
            if let Some((a, b)) = skip_edge {
                if (v == a && u == b) || (v == b && u == a) {
                    continue;
                }
            }
            edges.push((i, j));
        }
    }
    GraphRecord {
        num_nodes: nodes.len(),
        edges,
        features: nodes.iter().map(|&v| graph.features[v].clone()).collect(),
        label,
        domain: graph.domain.clone(),
    }
}

/// One ego-graph per centre (all nodes when `centers` is `None`). The centre
/// is node 0 of its record and the record label is the centre's label.
pub fn ego_sample(
    graph: &GraphRecord,
    node_labels: &[i64],
    centers: Option<&[usize]>,
    hops: usize,
    fanout: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if node_labels.len() != graph.num_nodes {
        return Err(DataError::Dataset {
            name: graph.domain.clone(),
            msg: format!(
                "{} node labels for {} nodes",
                node_labels.len(),
                graph.num_nodes
            ),
        });
    }
    let adj = Adjacency::of(graph);
    let all: Vec<usize> = (0..graph.num_nodes).collect();
    let centers = centers.unwrap_or(&all);
    let records = centers
        .iter()
        .map(|&c| {
            let mut rng = rng::stream(seed, &[rng::tag("ego"), c as u64]);
            let nodes = ego_nodes(&adj, &[c], hops, fanout, &mut rng);
            induced_subgraph(graph, &adj, &nodes, Some(node_labels[c]), None)
        })
        .collect();
    let mut ds = DomainDataset::new(graph.domain.clone(), records, Task::Node)?;
    if centers == all.as_slice() {
        ds.global_edges = Some(graph.canonical_edges());
    }
    Ok(ds)
}

/// Link samples: the ego-graph union of both endpoints, endpoints placed at
/// indices 0 and 1, with the queried edge itself removed.
pub fn link_sample(
    graph: &GraphRecord,
    pairs: &[(usize, usize, i64)],
    hops: usize,
    fanout: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    let adj = Adjacency::of(graph);
    let records = pairs
        .iter()
        .map(|&(a, b, label)| {
            let mut rng = rng::stream(seed, &[rng::tag("link"), a as u64, b as u64]);
            let nodes = ego_nodes(&adj, &[a, b], hops, fanout, &mut rng);
            induced_subgraph(graph, &adj, &nodes, Some(label), Some((a, b)))
        })
        .collect();
    DomainDataset::new(graph.domain.clone(), records, Task::Link)
}
