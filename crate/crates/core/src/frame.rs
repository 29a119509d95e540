//! Local geometry of one graph: sparse perturbation, tangent vectors,
//! orthogonal frame and metric.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{concat_cols, concat_rows, DiffError, Var};
use crate::encoder::{gcn_forward, mean_pool, normalized_adjacency, record_features, EncoderVars};
use crate::graph::GraphRecord;
use crate::linalg::Mat;
use crate::rng;

/// Jitter added to `WᵀW` so the metric is always positive definite.
pub const JITTER: f64 = 1e-8;
/// Relative residual below which a frame column counts as degenerate.
pub const DEGENERATE_TOL: f64 = 1e-8;
const FALLBACK_SEED: u64 = 0x6d67_6672_616d_6531;

/// Shared learnable perturbation-node features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBank {
    /// `M×F'`.
    pub p: Mat,
    pub k: usize,
}

impl PerturbationBank {
    pub fn init(m: usize, f: usize, k: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("bank")]);
        let s = 1.0 / (f as f64).sqrt();
        let p = Mat::from_fn(m, f, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            s * g
        });
        PerturbationBank { p, k }
    }

    pub fn m(&self) -> usize {
        self.p.rows()
    }
}

/// Record graph with the perturbation nodes appended after the original ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedGraph {
    pub num_original: usize,
    pub num_perturb: usize,
    /// Original edges with weight 1, then perturbation edges `(i, N + m, h)`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Original nodes chosen by each perturbation node, best score first.
    pub attachments: Vec<Vec<usize>>,
}

impl PerturbedGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_original + self.num_perturb
    }

    pub fn adjacency(&self) -> Mat {
        normalized_adjacency(self.num_nodes(), &self.edges)
    }
}

/// `s(i, m) = ⟨x_i, p_m⟩/√F'` as an `N×M` matrix.
pub fn attentive_scores(x: &Mat, p: &Mat) -> Mat {
    let s = 1.0 / (x.cols() as f64).sqrt();
    x.matmul(&p.transpose()).scale(s)
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Attaches every perturbation node to its top-`k` original nodes. Each
/// original node's perturbation-edge weights are a softmax of its scores over
/// the perturbation nodes it is attached to, so they sum to 1.
pub fn perturb_graph(edges: &[(usize, usize)], x: &Mat, p: &Mat, k: usize) -> PerturbedGraph {
    let n = x.rows();
    let m = p.rows();
    let k = k.min(n);
    let scores = attentive_scores(x, p);
    let attachments: Vec<Vec<usize>> = (0..m).map(|j| top_k(&scores.col(j), k)).collect();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, nodes) in attachments.iter().enumerate() {
        for &i in nodes {
            incident[i].push(j);
        }
    }
    let mut weights = vec![Vec::new(); m];
    for (i, ms) in incident.iter().enumerate() {
        if ms.is_empty() {
            continue;
        }
        let top = ms
            .iter()
            .map(|&j| scores.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = ms.iter().map(|&j| (scores.get(i, j) - top).exp()).collect();
        let total: f64 = e.iter().sum();
        for (&j, ej) in ms.iter().zip(e) {
            weights[j].push((i, ej / total));
        }
    }
    let mut all: Vec<(usize, usize, f64)> = edges.iter().map(|&(a, b)| (a, b, 1.0)).collect();
    for (j, ws) in weights.iter().enumerate() {
        for &(i, w) in ws {
            all.push((i, n + j, w));
        }
    }
    PerturbedGraph {
        num_original: n,
        num_perturb: m,
        edges: all,
        attachments,
    }
}

/// `z` (`1×d`, pooled over original nodes) and `V` (`d×M`, column `m` is the
/// embedding of perturbation node `m` minus `z`).
pub fn tangent_vectors<'t>(h: Var<'t>, n: usize) -> (Var<'t>, Var<'t>) {
    let (rows, d) = h.shape();
    let m = rows - n;
    let z = mean_pool(h, n);
    let fm = h.slice(n, 0, m, d);
    let ones = h.tape().constant(Mat::filled(m, 1, 1.0));
    (z, (fm - ones.matmul(z)).t())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthMode {
    /// `‖w_m‖ = ‖v_m‖`.
    #[default]
    TangentNorm,
    /// `‖w_m‖ = |R_mm|`, the Gram–Schmidt residual norm.
    ResidualNorm,
}

fn fallback_direction(d: usize, m: usize, previous: &[Mat]) -> Mat {
    let mut rng = rng::stream(FALLBACK_SEED, &[m as u64]);
    let mut u = Mat::from_fn(d, 1, |_, _| StandardNormal.sample(&mut rng));
    for _ in 0..2 {
        for q in previous {
            u = u.sub(&q.scale(q.dot(&u)));
        }
    }
    u.scale(1.0 / u.frob())
}

/// Modified Gram–Schmidt on the columns of `V` with length recovery. Returns
/// the frame and the number of degenerate columns replaced by a fixed
/// random direction.
pub fn orthogonal_frame<'t>(v: Var<'t>, mode: LengthMode) -> Result<(Var<'t>, usize), DiffError> {
    let (d, m) = v.shape();
    assert!(
        m <= d,
        "contract violation: frame with {m} columns in dimension {d}"
    );
    let tape = v.tape();
    let mut qs: Vec<Var<'t>> = Vec::with_capacity(m);
    let mut cols = Vec::with_capacity(m);
    let mut degenerate = 0;
    for j in 0..m {
        let vj = v.col(j);
        let vnorm_val = vj.value().frob();
        let mut u = vj;
        for q in &qs {
            u = u - q.scale(q.t().matmul(u));
        }
        let r_val = u.value().frob();
        if !(r_val >= DEGENERATE_TOL * vnorm_val) || r_val == 0.0 {
            degenerate += 1;
            let prev: Vec<Mat> = qs.iter().map(|q| q.value().as_ref().clone()).collect();
            let q = tape.constant(fallback_direction(d, j, &prev));
            let w = if vnorm_val > 0.0 {
                q.scale(vj.norm()? + JITTER)
            } else {
                q * JITTER
            };
            qs.push(q);
            cols.push(w);
            continue;
        }
        let r = u.norm()?;
        let q = u.scale(r.powf(-1.0));
        let len = match mode {
            LengthMode::TangentNorm => vj.norm()?,
            LengthMode::ResidualNorm => r,
        };
        cols.push(q.scale(len));
        qs.push(q);
    }
    Ok((concat_cols(&cols), degenerate))
}

/// `G = WᵀW + δI`.
pub fn local_metric<'t>(w: Var<'t>) -> Var<'t> {
    let m = w.shape().1;
    w.t().matmul(w) + w.tape().constant(Mat::eye(m).scale(JITTER))
}

/// Frame of one record on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FramedVars<'t> {
    /// `1×d`.
    pub z: Var<'t>,
    /// `d×M`.
    pub w: Var<'t>,
    /// `M×M`.
    pub g: Var<'t>,
    pub degenerate: usize,
}

impl FramedVars<'_> {
    pub fn values(&self) -> FramedEmbedding {
        FramedEmbedding {
            z: self.z.value().as_slice().to_vec(),
            w: self.w.value().as_ref().clone(),
            g: self.g.value().as_ref().clone(),
        }
    }
}

/// Plain-value frame of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramedEmbedding {
    pub z: Vec<f64>,
    pub w: Mat,
    pub g: Mat,
}

/// Inputs shared by every record frame in one forward pass.
pub struct FrameContext<'a, 't> {
    pub enc: &'a EncoderVars<'t>,
    /// Perturbation features on the tape (`M×F'`).
    pub bank: Var<'t>,
    pub k: usize,
    pub length_mode: LengthMode,
}

impl<'t> FrameContext<'_, 't> {
    /// Encodes `record` (features already projected to `F'`) with the
    /// perturbation nodes attached and builds its frame.
    pub fn frame(
        &self,
        record: &GraphRecord,
        x_proj: &Mat,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FramedVars<'t>, DiffError> {
        Ok(self.frame_and_nodes(record, x_proj, dropout_rng)?.0)
    }

    /// Like [`FrameContext::frame`], also returning all node embeddings of
    /// the perturbed graph (original nodes first).
    pub fn frame_and_nodes(
        &self,
        record: &GraphRecord,
        x_proj: &Mat,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(FramedVars<'t>, Var<'t>), DiffError> {
        let tape = self.bank.tape();
        let n = record.num_nodes;
        let pg = perturb_graph(
            &record.canonical_edges(),
            x_proj,
            &self.bank.value(),
            self.k,
        );
        let x = concat_rows(&[tape.constant(x_proj.clone()), self.bank]);
        let h = gcn_forward(self.enc, &pg.adjacency(), x, dropout_rng);
        let (z, v) = tangent_vectors(h, n);
        let (w, degenerate) = orthogonal_frame(v, self.length_mode)?;
        Ok((
            FramedVars {
                z,
                w,
                g: local_metric(w),
                degenerate,
            },
            h,
        ))
    }
}

pub fn project_features(record: &GraphRecord, projection: &Mat) -> Mat {
    record_features(record).matmul(projection)
}
