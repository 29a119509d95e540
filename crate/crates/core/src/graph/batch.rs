//! Mixture loader over several domains.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DomainDataset, GraphRecord};
use crate::rng;

/// Records drawn for one step, with node offsets for block-diagonal assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub records: Vec<GraphRecord>,
    /// `(dataset index, record index)` of each member.
    pub sources: Vec<(usize, usize)>,
    /// `offsets[i]` is the first node of record `i`; the last entry is the
    /// total node count.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(records: Vec<GraphRecord>, sources: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(records.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for r in &records {
            acc += r.num_nodes;
            offsets.push(acc);
        }
        GraphBatch {
            records,
            sources,
            offsets,
        }
    }

    pub fn from_dataset(ds: &DomainDataset, idx: usize, indices: &[usize]) -> Self {
        GraphBatch::new(
            indices.iter().map(|&i| ds.records[i].clone()).collect(),
            indices.iter().map(|&i| (idx, i)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

/// One epoch of batches. Each draw picks a domain uniformly among those with
/// records left, then takes that domain's next record from a seeded
/// permutation, so every record is used exactly once.
pub fn make_batches(datasets: &[DomainDataset], batch_size: usize, seed: u64) -> Vec<GraphBatch> {
    assert!(
        batch_size >= 1,
        "contract violation: batch_size must be >= 1"
    );
    let mut rng = rng::stream(seed, &[rng::tag("batches")]);
    let mut queues: Vec<Vec<usize>> = datasets
        .iter()
        .map(|d| {
            let mut q: Vec<usize> = (0..d.len()).collect();
            q.shuffle(&mut rng);
            q.reverse();
            q
        })
        .collect();
    let total: usize = queues.iter().map(Vec::len).sum();
    let mut order = Vec::with_capacity(total);
    loop {
        let live: Vec<usize> = (0..queues.len())
            .filter(|&i| !queues[i].is_empty())
            .collect();
        if live.is_empty() {
            break;
        }
        let d = live[rng.random_range(0..live.len())];
        let r = queues[d].pop().expect("live queue");
        order.push((d, r));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            GraphBatch::new(
                chunk
                    .iter()
                    .map(|&(d, r)| datasets[d].records[r].clone())
                    .collect(),
                chunk.to_vec(),
            )
        })
        .collect()
}
