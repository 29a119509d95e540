//! Pre-trained state: encoder, perturbation bank, input projections and
//! prototypes, plus the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape};
use crate::encoder::{projection_matrix, EncoderParams};
use crate::frame::{project_features, FrameContext, FramedEmbedding, LengthMode};
use crate::graph::GraphRecord;
use crate::linalg::Mat;
use crate::prototypes::Prototypes;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub bank: crate::frame::PerturbationBank,
    /// Fixed projections keyed by raw feature width.
    pub projections: BTreeMap<usize, Mat>,
    pub prototypes: Prototypes,
    pub length_mode: LengthMode,
    pub projection_seed: u64,
}

/// Shapes of a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub manifold_dim: usize,
    pub k_perturb: usize,
    pub dropout: f64,
}

impl Model {
    pub fn init(dims: ModelDims, length_mode: LengthMode, seed: u64) -> Self {
        Model {
            encoder: EncoderParams::init(
                dims.feature_dim,
                dims.hidden_dim,
                dims.embed_dim,
                dims.dropout,
                seed,
            ),
            bank: crate::frame::PerturbationBank::init(
                dims.manifold_dim,
                dims.feature_dim,
                dims.k_perturb,
                seed,
            ),
            projections: BTreeMap::new(),
            prototypes: Prototypes::new(),
            length_mode,
            projection_seed: rng::derive_seed(seed, &[rng::tag("projection")]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn manifold_dim(&self) -> usize {
        self.bank.m()
    }

    /// Registers the projection for a raw feature width.
    pub fn ensure_projection(&mut self, raw_dim: usize) {
        let out = self.encoder.input_dim();
        let seed = self.projection_seed;
        self.projections
            .entry(raw_dim)
            .or_insert_with(|| projection_matrix(raw_dim, out, seed));
    }

    /// Projection for `raw_dim`; unseen widths get the same seeded matrix
    /// `ensure_projection` would store.
    pub fn projection(&self, raw_dim: usize) -> Mat {
        self.projections.get(&raw_dim).cloned().unwrap_or_else(|| {
            projection_matrix(raw_dim, self.encoder.input_dim(), self.projection_seed)
        })
    }

    /// Trainable tensors in optimizer order.
    pub fn params(&self) -> [&Mat; 5] {
        [
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.bank.p,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Mat; 5] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.bank.p,
        ]
    }

    /// Evaluation-mode frame of one record.
    pub fn frame_values(&self, record: &GraphRecord) -> Result<FramedEmbedding, DiffError> {
        Ok(self.frame_with_nodes(record)?.0)
    }

    /// Evaluation-mode frame plus the embeddings of the original nodes.
    pub fn frame_with_nodes(
        &self,
        record: &GraphRecord,
    ) -> Result<(FramedEmbedding, Mat), DiffError> {
        let tape = Tape::new();
        let enc = self.encoder.on(&tape, false);
        let bank = tape.constant(self.bank.p.clone());
        let ctx = FrameContext {
            enc: &enc,
            bank,
            k: self.bank.k,
            length_mode: self.length_mode,
        };
        let x = project_features(record, &self.projection(record.feature_dim()));
        let (framed, h) = ctx.frame_and_nodes(record, &x, None)?;
        let nodes = h.value().slice(0, 0, record.num_nodes, h.shape().1);
        Ok((framed.values(), nodes))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat], lr: f64) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "contract violation: parameter count"
        );
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].as_mut_slice();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].as_slice(), self.v[i].as_slice());
            for (j, pj) in p.as_mut_slice().iter_mut().enumerate() {
                *pj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `lr_min + ½(lr₀ − lr_min)(1 + cos(πt/T))` with `lr_min = lr₀/100`.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> f64 {
    let lr_min = lr0 / 100.0;
    let frac = if total == 0 {
        0.0
    } else {
        (t as f64 / total as f64).min(1.0)
    };
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Mat::row_vector(&[1.0, -1.0]);
        let mut adam = Adam::new(&[(1, 2)]);
        adam.step(&mut [&mut p], &[Mat::row_vector(&[3.0, -0.5])], 0.1);
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-8);
        assert!((p.as_slice()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Mat::row_vector(&[5.0]);
        let mut adam = Adam::new(&[(1, 1)]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            adam.step(&mut [&mut p], &[g], 0.05);
        }
        assert!(p.item().abs() < 1e-2);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 100, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }
}
