//! Per-domain Riemannian prototypes and the sample–prototype loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Reduce, Var};
use crate::linalg::{sym_exp, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("no prototype for domain `{0}`")]
    Missing(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// EMA pair `(z, log G)` of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiemannianPrototype {
    pub domain: String,
    pub z: Vec<f64>,
    pub log_g: Mat,
    pub update_count: u64,
}

impl RiemannianPrototype {
    pub fn new(domain: impl Into<String>, d: usize, m: usize) -> Self {
        RiemannianPrototype {
            domain: domain.into(),
            z: vec![0.0; d],
            log_g: Mat::zeros(m, m),
            update_count: 0,
        }
    }

    /// `x ← βx + (1−β)·mean`; the first update copies the batch mean.
    pub fn ema_update(&mut self, z_mean: &[f64], log_g_mean: &Mat, beta: f64) {
        assert!(
            beta > 0.0 && beta < 1.0,
            "contract violation: beta {beta} outside (0, 1)"
        );
        assert_eq!(
            z_mean.len(),
            self.z.len(),
            "contract violation: prototype dimension"
        );
        if self.update_count == 0 {
            self.z = z_mean.to_vec();
            self.log_g = log_g_mean.symmetrize();
        } else {
            for (p, m) in self.z.iter_mut().zip(z_mean) {
                *p = beta * *p + (1.0 - beta) * m;
            }
            self.log_g = self
                .log_g
                .scale(beta)
                .add(&log_g_mean.scale(1.0 - beta))
                .symmetrize();
        }
        self.update_count += 1;
    }

    /// `exp(log G)`.
    pub fn metric(&self) -> Mat {
        sym_exp(&self.log_g)
    }
}

pub type Prototypes = BTreeMap<String, RiemannianPrototype>;

/// `−mean_b log softmax_k(cos(z_b, z_k)/τ)[own domain]`. Prototypes are
/// constants; gradients reach only `z`.
pub fn proto_contrastive_loss<'t>(
    z: Var<'t>,
    domains: &[&str],
    protos: &Prototypes,
    temperature: f64,
) -> Result<Var<'t>, ProtoError> {
    assert!(
        temperature > 0.0,
        "contract violation: temperature must be positive"
    );
    let (b, d) = z.shape();
    assert_eq!(b, domains.len(), "contract violation: one domain per row");
    let names: Vec<&String> = protos.keys().collect();
    let mut onehot = Mat::zeros(b, names.len());
    for (row, dom) in domains.iter().enumerate() {
        let col = names
            .iter()
            .position(|n| n.as_str() == *dom)
            .ok_or_else(|| ProtoError::Missing(dom.to_string()))?;
        onehot.set(row, col, 1.0);
    }
    let tape = z.tape();
    let pmat = Mat::from_fn(names.len(), d, |k, j| protos[names[k]].z[j]);
    let pn = normalize_rows_value(&pmat);
    let zn = normalize_rows(z)?;
    let logits = zn.matmul(tape.constant(pn.transpose())) * (1.0 / temperature);
    let probs = logits.softmax_rows();
    let own = (probs * tape.constant(onehot)).sum_along(Reduce::Cols);
    Ok(-own.ln()?.mean())
}

fn normalize_rows_value(m: &Mat) -> Mat {
    Mat::from_fn(m.rows(), m.cols(), |i, j| {
        let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            m.get(i, j) / n
        } else {
            0.0
        }
    })
}

/// Rows scaled to unit length on the tape.
pub fn normalize_rows<'t>(z: Var<'t>) -> Result<Var<'t>, DiffError> {
    let d = z.shape().1;
    let norms = z.square().sum_along(Reduce::Cols).sqrt()?;
    let ones = z.tape().constant(Mat::filled(1, d, 1.0));
    Ok(z / norms.matmul(ones))
}

/// The `k` nearest prototypes to `z` by Euclidean distance, ties broken by
/// domain name.
pub fn nearest_prototypes(z: &[f64], protos: &Prototypes, k: usize) -> Vec<String> {
    assert!(
        k <= protos.len(),
        "contract violation: k = {k} exceeds {} prototypes",
        protos.len()
    );
    let mut ranked: Vec<(f64, &String)> = protos
        .iter()
        .map(|(name, p)| {
            (
                p.z.iter()
                    .zip(z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
                name,
            )
        })
        .collect();
    // BTreeMap iteration is already name-ordered; a stable sort keeps it for ties
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    ranked.into_iter().take(k).map(|(_, n)| n.clone()).collect()
}
