//! Two-layer GCN encoder with mean pooling, plus the fixed input projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::graph::{GraphBatch, GraphRecord};
use crate::linalg::Mat;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub dropout: f64,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(f_in: usize, hidden: usize, d: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("encoder")]);
        let mut glorot = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Mat::from_fn(r, c, |_, _| rng.random_range(-a..a))
        };
        EncoderParams {
            w1: glorot(f_in, hidden),
            b1: Mat::zeros(1, hidden),
            w2: glorot(hidden, d),
            b2: Mat::zeros(1, d),
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn on<'t>(&self, tape: &'t Tape, trainable: bool) -> EncoderVars<'t> {
        let put = |m: &Mat| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        EncoderVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            dropout: self.dropout,
        }
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub dropout: f64,
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` for a weighted undirected edge list.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize, f64)]) -> Mat {
    let mut a = Mat::eye(n);
    for &(i, j, w) in edges {
        a.set(i, j, a.get(i, j) + w);
        a.set(j, i, a.get(j, i) + w);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    Mat::from_fn(n, n, |i, j| a.get(i, j) * inv_sqrt[i] * inv_sqrt[j])
}

pub fn record_adjacency(record: &GraphRecord) -> Mat {
    let edges: Vec<(usize, usize, f64)> = record
        .canonical_edges()
        .into_iter()
        .map(|(a, b)| (a, b, 1.0))
        .collect();
    normalized_adjacency(record.num_nodes, &edges)
}

fn broadcast_rows<'t>(b: Var<'t>, n: usize) -> Var<'t> {
    b.tape().constant(Mat::filled(n, 1, 1.0)).matmul(b)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    Mat::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Node embeddings `Â·ReLU(Â X W₁ + b₁)·W₂ + b₂`. Dropout sits between the
/// layers and is active only when `dropout_rng` is given.
pub fn gcn_forward<'t>(
    enc: &EncoderVars<'t>,
    adj: &Mat,
    x: Var<'t>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var<'t> {
    let tape = x.tape();
    let n = adj.rows();
    assert_eq!(
        x.shape().0,
        n,
        "contract violation: feature rows vs adjacency"
    );
    assert_eq!(
        x.shape().1,
        enc.w1.shape().0,
        "contract violation: feature dim vs encoder input"
    );
    let a = tape.constant(adj.clone());
    let mut h = (a.matmul(x).matmul(enc.w1) + broadcast_rows(enc.b1, n)).relu();
    if let Some(rng) = dropout_rng {
        if enc.dropout > 0.0 {
            let (r, c) = h.shape();
            h = h * tape.constant(dropout_mask(r, c, enc.dropout, rng));
        }
    }
    a.matmul(h).matmul(enc.w2) + broadcast_rows(enc.b2, n)
}

/// Mean of the first `n` rows (the record's original nodes) as a `1×d` row.
pub fn mean_pool<'t>(h: Var<'t>, n: usize) -> Var<'t> {
    assert!(
        n >= 1 && n <= h.shape().0,
        "contract violation: pooling over {n} of {} rows",
        h.shape().0
    );
    let w = h.tape().constant(Mat::filled(1, n, 1.0 / n as f64));
    let rows = if n == h.shape().0 {
        h
    } else {
        h.slice(0, 0, n, h.shape().1)
    };
    w.matmul(rows)
}

/// Fixed Gaussian projection from a raw feature width to the encoder width.
pub fn projection_matrix(raw_dim: usize, out_dim: usize, seed: u64) -> Mat {
    let mut rng = rng::stream(
        seed,
        &[rng::tag("projection"), raw_dim as u64, out_dim as u64],
    );
    let s = 1.0 / (out_dim as f64).sqrt();
    Mat::from_fn(raw_dim, out_dim, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        s * g
    })
}

pub fn record_features(record: &GraphRecord) -> Mat {
    Mat::from_rows(&record.features)
}

/// Embeddings of every record in a batch; records are independent blocks.
pub fn encode_batch<'t>(
    enc: &EncoderVars<'t>,
    projection: &Mat,
    batch: &GraphBatch,
    train_mode: bool,
    seed: u64,
) -> Vec<Var<'t>> {
    let tape = enc.w1.tape();
    batch
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = tape.constant(record_features(r).matmul(projection));
            let adj = record_adjacency(r);
            if train_mode {
                let mut rng = rng::stream(seed, &[rng::tag("dropout"), i as u64]);
                gcn_forward(enc, &adj, x, Some(&mut rng))
            } else {
                gcn_forward(enc, &adj, x, None)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradient;
    use crate::diff::DiffError;

    fn eye_params(f: usize) -> EncoderParams {
        EncoderParams {
            w1: Mat::eye(f),
            b1: Mat::zeros(1, f),
            w2: Mat::eye(f),
            b2: Mat::zeros(1, f),
            dropout: 0.0,
        }
    }

    #[test]
    fn single_node_uses_self_loop_only() {
        let adj = normalized_adjacency(1, &[]);
        assert_eq!(adj, Mat::eye(1));
        let tape = Tape::new();
        let enc = eye_params(2).on(&tape, false);
        let x = tape.constant(Mat::row_vector(&[1.0, -2.0]));
        let h = gcn_forward(&enc, &adj, x, None);
        assert_eq!(h.value().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn isolated_nodes_are_independent() {
        let p = EncoderParams::init(3, 5, 4, 0.0, 1);
        let tape = Tape::new();
        let enc = p.on(&tape, false);
        let x = Mat::from_rows(&[vec![1.0, 0.5, -1.0], vec![0.2, 0.3, 0.4]]);
        let both = gcn_forward(
            &enc,
            &normalized_adjacency(2, &[]),
            tape.constant(x.clone()),
            None,
        )
        .value();
        for i in 0..2 {
            let one =
                gcn_forward(&enc, &Mat::eye(1), tape.constant(x.slice(i, 0, 1, 3)), None).value();
            assert_eq!(one.row(0), both.row(i));
        }
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::new();
        let h = tape.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(mean_pool(h, 2).value().as_slice(), &[0.5, 0.5]);
        let r = tape.constant(Mat::from_rows(&vec![vec![0.25, 3.0]; 4]));
        assert_eq!(mean_pool(r, 4).value().as_slice(), &[0.25, 3.0]);
    }

    #[test]
    fn dropout_is_seeded_and_train_only() {
        let p = EncoderParams::init(2, 8, 3, 0.5, 4);
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
        let adj = normalized_adjacency(2, &[(0, 1, 1.0)]);
        let run = |seed: Option<u64>| {
            let tape = Tape::new();
            let enc = p.on(&tape, false);
            let mut rng = seed.map(|s| rng::stream(s, &[]));
            gcn_forward(&enc, &adj, tape.constant(x.clone()), rng.as_mut())
                .value()
                .as_ref()
                .clone()
        };
        assert_eq!(run(Some(1)), run(Some(1)));
        assert_eq!(run(None), run(None));
        assert_ne!(run(Some(1)), run(None));
    }

    #[test]
    fn encoder_gradients() {
        let p = EncoderParams::init(3, 4, 2, 0.0, 2);
        let x = Mat::from_rows(&[
            vec![1.0, 0.5, -1.0],
            vec![0.2, 0.3, 0.4],
            vec![-0.7, 0.1, 0.9],
        ]);
        let adj = normalized_adjacency(3, &[(0, 1, 1.0), (1, 2, 0.5)]);
        let check = check_gradient(
            |tape, v| {
                let enc = EncoderVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                    dropout: 0.0,
                };
                let h = gcn_forward(&enc, &adj, tape.constant(x.clone()), None);
                Ok::<_, DiffError>(mean_pool(h, 3).frob_sq())
            },
            &[
                p.w1.clone(),
                p.b1.add(&Mat::filled(1, 4, 0.3)),
                p.w2.clone(),
                p.b2.clone(),
            ],
            1e-5,
        );
        assert!(check.passes(1e-6), "{check:?}");
    }
}
