//! Few-shot adaptation to a target domain over a frozen pre-trained model:
//! prompt matrix, transfer graph to the nearest prototypes, Riemannian
//! mixture-of-experts alignment, task head and the geometric transfer metric.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AdaptConfig, ConfigError};
use crate::diff::{concat_cols, concat_rows, DiffError, Reduce, Tape, Var};
use crate::frame::{local_metric, orthogonal_frame, FramedEmbedding, LengthMode};
use crate::gluing::{spd_log_diag, GeometryCache, GlueError, TrianglePath};
use crate::graph::{DomainDataset, Task};
use crate::linalg::{sym_exp, Mat};
use crate::model::{Adam, Model};
use crate::prototypes::{nearest_prototypes, Prototypes};
use crate::rng;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("checkpoint has no prototypes")]
    NoPrototypes,
    #[error("class {class} has {have} labelled records, {need} shots requested")]
    TooFewShots {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("target dataset has no labelled records")]
    NoLabels,
    #[error("label {label} outside 0..{classes}")]
    BadLabel { label: i64, classes: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Glue(#[from] GlueError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `z_adapt = Qz`; the prompted frame columns `Qw_m` are re-orthogonalized
/// before the metric is formed. Returns `(z_adapt, W_adapt, G_adapt)`.
pub fn prompt_adapt<'t>(
    z: Var<'t>,
    w: Var<'t>,
    q: Var<'t>,
    mode: LengthMode,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), DiffError> {
    let d = q.shape().0;
    assert_eq!(
        q.shape(),
        (d, d),
        "contract violation: prompt must be square"
    );
    let za = z.matmul(q.t());
    let (wa, _) = orthogonal_frame(q.matmul(w), mode)?;
    Ok((za, wa, local_metric(wa)))
}

/// Prototype values in a fixed (name) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoTable {
    pub names: Vec<String>,
    pub log_g: Vec<Mat>,
    /// `exp(log G)` per prototype.
    pub metrics: Vec<Mat>,
    /// `K×M`, row `k` is `diag(log G_k)`.
    pub log_diag: Mat,
    protos: Prototypes,
}

impl ProtoTable {
    pub fn new(protos: &Prototypes) -> Result<Self, AdaptError> {
        if protos.is_empty() {
            return Err(AdaptError::NoPrototypes);
        }
        let names: Vec<String> = protos.keys().cloned().collect();
        let log_g: Vec<Mat> = protos.values().map(|p| p.log_g.clone()).collect();
        let metrics = log_g.iter().map(sym_exp).collect();
        let rows: Vec<Vec<f64>> = log_g.iter().map(Mat::diagonal).collect();
        Ok(ProtoTable {
            names,
            log_g,
            metrics,
            log_diag: Mat::from_rows(&rows),
            protos: protos.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Indices of the `k` nearest prototypes to `z`, nearest first.
    pub fn nearest(&self, z: &[f64], k: usize) -> Vec<usize> {
        nearest_prototypes(z, &self.protos, k.min(self.len()))
            .iter()
            .map(|n| self.names.iter().position(|m| m == n).expect("known name"))
            .collect()
    }
}

/// Star from the target (node 0) to its nearest prototypes (nodes
/// `1..=k`, nearest first) plus edges between consecutive prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferGraph {
    /// Prototype-table index of node `r + 1`.
    pub prototypes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    /// `(a, target, b)` and `(target, a, b)` for each consecutive pair.
    pub paths: Vec<TrianglePath>,
}

impl TransferGraph {
    pub fn build(z_adapt: &[f64], table: &ProtoTable, k: usize) -> Self {
        assert!(k >= 1, "contract violation: k must be at least 1");
        let prototypes = table.nearest(z_adapt, k);
        let n = prototypes.len();
        let mut edges: Vec<(usize, usize)> = (1..=n).map(|a| (0, a)).collect();
        let mut paths = Vec::new();
        for a in 1..n {
            edges.push((a, a + 1));
            paths.push(TrianglePath::new(a, 0, a + 1));
            paths.push(TrianglePath::new(0, a, a + 1));
        }
        TransferGraph {
            prototypes,
            edges,
            paths,
        }
    }

    /// Target metric followed by the prototype metrics as constants.
    pub fn metrics<'t>(&self, g_target: Var<'t>, table: &ProtoTable) -> Vec<Var<'t>> {
        let tape = g_target.tape();
        std::iter::once(g_target)
            .chain(
                self.prototypes
                    .iter()
                    .map(|&p| tape.constant(table.metrics[p].clone())),
            )
            .collect()
    }

    /// Mean holonomy and curvature terms over the paths; a single edge falls
    /// back to `‖P − I‖²_F` and `|log r|²`.
    pub fn glue_losses<'t>(&self, metrics: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>), GlueError> {
        let mut cache = GeometryCache::new(metrics);
        if self.paths.is_empty() {
            return Ok((
                cache.edge_holonomy_term(0, 1)?,
                cache.edge_curvature_term(0, 1)?,
            ));
        }
        let n = self.paths.len() as f64;
        let mut holo: Option<Var<'t>> = None;
        let mut curv: Option<Var<'t>> = None;
        for &p in &self.paths {
            let h = cache.holonomy_term(p)?;
            let c = cache.curvature_term(p)?;
            holo = Some(holo.map_or(h, |acc| acc + h));
            curv = Some(curv.map_or(c, |acc| acc + c));
        }
        Ok((
            holo.expect("paths") * (1.0 / n),
            curv.expect("paths") * (1.0 / n),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtmReport {
    pub delta_h: f64,
    pub delta_c: f64,
    pub gtm: f64,
}

impl GtmReport {
    pub fn new(delta_h: f64, delta_c: f64) -> Self {
        GtmReport {
            delta_h,
            delta_c,
            gtm: delta_h + delta_c,
        }
    }

    /// Component-wise mean; `None` for an empty list.
    pub fn mean(reports: &[GtmReport]) -> Option<GtmReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(GtmReport::new(
            reports.iter().map(|r| r.delta_h).sum::<f64>() / n,
            reports.iter().map(|r| r.delta_c).sum::<f64>() / n,
        ))
    }
}

/// Pure measurement on plain values.
pub fn gtm(
    graph: &TransferGraph,
    g_target: &Mat,
    table: &ProtoTable,
) -> Result<GtmReport, GlueError> {
    let tape = Tape::new();
    let metrics = graph.metrics(tape.constant(g_target.clone()), table);
    let (h, c) = graph.glue_losses(&metrics)?;
    Ok(GtmReport::new(h.item(), c.item()))
}

/// Gate weights `softmax(ReLU(x W₁ + b₁) W₂ + b₂)` over the prototypes for
/// a single `1×(d+M)` input row.
pub fn gate<'t>(x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>) -> Var<'t> {
    assert_eq!(x.shape().0, 1, "contract violation: gate takes one row");
    ((x.matmul(w1) + b1).relu().matmul(w2) + b2).softmax_rows()
}

/// `Σ_k β_k log G_k`.
pub fn moe_align<'t>(beta: Var<'t>, log_gs: &[Mat]) -> Var<'t> {
    assert_eq!(
        beta.shape(),
        (1, log_gs.len()),
        "contract violation: one weight per expert"
    );
    let tape = beta.tape();
    let mut acc: Option<Var<'t>> = None;
    for (k, l) in log_gs.iter().enumerate() {
        let term = tape.constant(l.clone()).scale(beta.slice(0, k, 1, 1));
        acc = Some(acc.map_or(term, |a| a + term));
    }
    acc.expect("at least one expert")
}

/// `[z; diag log G_adapt; diag log G_align]` as a `1×(d+2M)` row.
pub fn task_representation<'t>(
    z: Var<'t>,
    log_diag_adapt: Var<'t>,
    log_diag_align: Var<'t>,
) -> Var<'t> {
    concat_cols(&[z, log_diag_adapt, log_diag_align])
}

/// Trainable adaptation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptParams {
    pub q: Mat,
    pub gate_w1: Mat,
    pub gate_b1: Mat,
    pub gate_w2: Mat,
    pub gate_b2: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
    /// `d×d` endpoint form for link tasks.
    pub bilinear: Option<Mat>,
}

impl AdaptParams {
    /// `Q = I`, zero second gate layer (uniform gate), Glorot elsewhere.
    pub fn init(
        d: usize,
        m: usize,
        experts: usize,
        classes: usize,
        gate_hidden: usize,
        link: bool,
        seed: u64,
    ) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("adapt-init")]);
        let mut glorot = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Mat::from_fn(r, c, |_, _| rng.random_range(-a..a))
        };
        AdaptParams {
            q: Mat::eye(d),
            gate_w1: glorot(d + m, gate_hidden),
            gate_b1: Mat::zeros(1, gate_hidden),
            gate_w2: Mat::zeros(gate_hidden, experts),
            gate_b2: Mat::zeros(1, experts),
            head_w: glorot(d + 2 * m, classes),
            head_b: Mat::zeros(1, classes),
            bilinear: link.then(|| Mat::zeros(d, d)),
        }
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![
            &self.q,
            &self.gate_w1,
            &self.gate_b1,
            &self.gate_w2,
            &self.gate_b2,
            &self.head_w,
            &self.head_b,
        ];
        v.extend(self.bilinear.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![
            &mut self.q,
            &mut self.gate_w1,
            &mut self.gate_b1,
            &mut self.gate_w2,
            &mut self.gate_b2,
            &mut self.head_w,
            &mut self.head_b,
        ];
        v.extend(self.bilinear.as_mut());
        v
    }

    pub fn to_vec(&self) -> Vec<Mat> {
        self.tensors().into_iter().cloned().collect()
    }
}

/// Frozen encoder outputs of one target record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRecord {
    pub frame: FramedEmbedding,
    /// Embeddings of nodes 0 and 1, used by the link head.
    pub ends: Option<(Vec<f64>, Vec<f64>)>,
    pub label: Option<usize>,
}

/// Per-record outputs of one forward pass.
pub struct RecordOutput<'t> {
    pub logits: Var<'t>,
    pub z_task: Var<'t>,
    pub holo: Var<'t>,
    pub curv: Var<'t>,
    pub g_adapt: Var<'t>,
}

/// Aggregates over a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalStats {
    pub loss_task: f64,
    pub loss_holo: f64,
    pub loss_curv: f64,
    pub accuracy: f64,
}

/// Frozen data plus everything the forward pass needs besides the
/// trainable tensors.
pub struct AdaptProblem {
    pub records: Vec<FrozenRecord>,
    pub table: ProtoTable,
    pub classes: usize,
    pub k: usize,
    pub length_mode: LengthMode,
    pub use_adapted_z: bool,
    pub link: bool,
}

impl AdaptProblem {
    pub fn new(
        model: &Model,
        dataset: &DomainDataset,
        cfg: &AdaptConfig,
    ) -> Result<Self, AdaptError> {
        let table = ProtoTable::new(&model.prototypes)?;
        let classes = dataset.num_classes.max(1);
        let link = dataset.task == Task::Link;
        let mut records = Vec::with_capacity(dataset.len());
        for r in &dataset.records {
            let label = match r.label {
                Some(l) if l < 0 || l as usize >= classes => {
                    return Err(AdaptError::BadLabel { label: l, classes })
                }
                l => l.map(|l| l as usize),
            };
            let (frame, nodes) = model.frame_with_nodes(r)?;
            let ends =
                (link && r.num_nodes >= 2).then(|| (nodes.row(0).to_vec(), nodes.row(1).to_vec()));
            records.push(FrozenRecord { frame, ends, label });
        }
        Ok(AdaptProblem {
            records,
            table,
            classes,
            k: cfg.k_prototypes,
            length_mode: model.length_mode,
            use_adapted_z: cfg.use_adapted_z,
            link,
        })
    }

    pub fn init_params(&self, gate_hidden: usize, seed: u64) -> AdaptParams {
        let f = &self.records.first().expect("non-empty target").frame;
        AdaptParams::init(
            f.z.len(),
            f.g.rows(),
            self.table.len(),
            self.classes,
            gate_hidden,
            self.link,
            seed,
        )
    }

    /// Forward pass of one record. `p` holds the trainable tensors in
    /// [`AdaptParams::tensors`] order.
    pub fn forward<'t>(
        &self,
        p: &[Var<'t>],
        record: usize,
    ) -> Result<RecordOutput<'t>, AdaptError> {
        let tape = p[0].tape();
        let rec = &self.records[record];
        let z = tape.constant(Mat::row_vector(&rec.frame.z));
        let w = tape.constant(rec.frame.w.clone());
        let (za, _, ga) = prompt_adapt(z, w, p[0], self.length_mode)?;
        let graph = TransferGraph::build(za.value().as_slice(), &self.table, self.k);
        let (holo, curv) = graph.glue_losses(&graph.metrics(ga, &self.table))?;
        let ld_adapt = spd_log_diag(ga)?.t();
        let beta = gate(concat_cols(&[za, ld_adapt]), p[1], p[2], p[3], p[4]);
        let ld_align = beta.matmul(tape.constant(self.table.log_diag.clone()));
        let z_task =
            task_representation(if self.use_adapted_z { za } else { z }, ld_adapt, ld_align);
        let mut logits = z_task.matmul(p[5]) + p[6];
        if let (true, Some((h0, h1))) = (self.link, &rec.ends) {
            let score = tape
                .constant(Mat::row_vector(h0))
                .matmul(p[7])
                .matmul(tape.constant(Mat::col_vector(h1)));
            let mut e1 = Mat::zeros(1, self.classes);
            e1.set(0, 1.min(self.classes - 1), 1.0);
            logits = logits + score.matmul(tape.constant(e1));
        }
        Ok(RecordOutput {
            logits,
            z_task,
            holo,
            curv,
            g_adapt: ga,
        })
    }

    /// `L_task + λ(L_holo + L_curv)` averaged over `idx`, with the three
    /// parts. The gluing terms stay on the tape even when `λ = 0`.
    pub fn loss<'t>(
        &self,
        p: &[Var<'t>],
        idx: &[usize],
        lambda: f64,
    ) -> Result<(Var<'t>, [Var<'t>; 3]), AdaptError> {
        assert!(!idx.is_empty(), "contract violation: empty record set");
        let outs = idx
            .iter()
            .map(|&i| self.forward(p, i))
            .collect::<Result<Vec<_>, _>>()?;
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| self.records[i].label.expect("labelled record"))
            .collect();
        let logits = concat_rows(&outs.iter().map(|o| o.logits).collect::<Vec<_>>());
        let task = cross_entropy(logits, &labels)?;
        let n = 1.0 / idx.len() as f64;
        let holo = concat_rows(&outs.iter().map(|o| o.holo).collect::<Vec<_>>()).sum() * n;
        let curv = concat_rows(&outs.iter().map(|o| o.curv).collect::<Vec<_>>()).sum() * n;
        Ok((task + (holo + curv) * lambda, [task, holo, curv]))
    }

    /// Task loss, gluing terms and accuracy of `idx` under `params`, plus
    /// per-record GTM reports.
    pub fn evaluate(
        &self,
        params: &AdaptParams,
        idx: &[usize],
    ) -> Result<(EvalStats, Vec<GtmReport>), AdaptError> {
        if idx.is_empty() {
            return Ok((EvalStats::default(), Vec::new()));
        }
        let tape = Tape::new();
        let p: Vec<Var<'_>> = params
            .tensors()
            .into_iter()
            .map(|m| tape.constant(m.clone()))
            .collect();
        let mut reports = Vec::with_capacity(idx.len());
        let mut stats = EvalStats::default();
        let n = idx.len() as f64;
        for &i in idx {
            let out = self.forward(&p, i)?;
            let label = self.records[i].label.expect("labelled record");
            let logits = out.logits.value();
            stats.loss_task += cross_entropy_value(logits.row(0), label) / n;
            if argmax(logits.row(0)) == label {
                stats.accuracy += 1.0 / n;
            }
            let report = GtmReport::new(out.holo.item(), out.curv.item());
            stats.loss_holo += report.delta_h / n;
            stats.loss_curv += report.delta_c / n;
            reports.push(report);
        }
        Ok((stats, reports))
    }
}

/// Mean `−log softmax(logits)[label]` over rows.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>, DiffError> {
    let (n, c) = logits.shape();
    assert_eq!(n, labels.len(), "contract violation: one label per row");
    let lv = logits.value();
    let shift = Mat::from_fn(n, c, |i, _| {
        lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    let mut onehot = Mat::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    let tape = logits.tape();
    let shifted = logits - tape.constant(shift);
    let lse = shifted.exp().sum_along(Reduce::Cols).ln()?;
    let own = (shifted * tape.constant(onehot)).sum_along(Reduce::Cols);
    Ok((lse - own).mean())
}

fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - top).exp()).sum::<f64>().ln() + top;
    lse - logits[label]
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Record indices for training, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `shots` labelled records per class for training; the remaining labelled
/// records are shuffled and split `val_fraction` / rest into validation and
/// test.
pub fn few_shot_split(
    labels: &[Option<usize>],
    classes: usize,
    shots: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Split, AdaptError> {
    assert!(
        shots >= 1,
        "contract violation: at least one shot per class"
    );
    if labels.iter().all(Option::is_none) {
        return Err(AdaptError::NoLabels);
    }
    let mut rng = rng::stream(seed, &[rng::tag("split")]);
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == Some(class))
            .collect();
        if members.len() < shots {
            return Err(AdaptError::TooFewShots {
                class,
                have: members.len(),
                need: shots,
            });
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..shots]);
        rest.extend_from_slice(&members[shots..]);
    }
    train.sort_unstable();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let n_val = (val_fraction * rest.len() as f64).round() as usize;
    let mut val = rest[..n_val].to_vec();
    let mut test = rest[n_val..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// One adaptation epoch; row 0 is evaluated before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_holo: f64,
    pub loss_curv: f64,
    /// Mean GTM over the test split.
    pub gtm: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub delta_h: f64,
    pub delta_c: f64,
    pub test_loss: f64,
}

impl AdaptRow {
    pub const CSV_HEADER: &'static str = "epoch,loss_task,loss_holo,loss_curv,gtm,val_acc,test_acc";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_task,
            self.loss_holo,
            self.loss_curv,
            self.gtm,
            self.val_acc,
            self.test_acc
        )
    }
}

pub fn adapt_csv(rows: &[AdaptRow]) -> String {
    let mut s = String::from(AdaptRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub params: AdaptParams,
    pub split: Split,
    pub rows: Vec<AdaptRow>,
    /// Test-split GTM of the final adapted state.
    pub report: Option<GtmReport>,
    pub test_acc: f64,
}

/// Trains prompt, gate and head on the few-shot split with Adam; the model
/// is only read.
pub fn run_adapt(
    model: &Model,
    target: &DomainDataset,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    let problem = AdaptProblem::new(model, target, cfg)?;
    let labels: Vec<Option<usize>> = problem.records.iter().map(|r| r.label).collect();
    let split = few_shot_split(
        &labels,
        problem.classes,
        cfg.shots,
        cfg.val_fraction,
        cfg.seed,
    )?;
    let mut params = problem.init_params(cfg.gate_hidden, cfg.seed);
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let mut report = None;
    for epoch in 0..=cfg.epochs {
        let (train, _) = problem.evaluate(&params, &split.train)?;
        let (val, _) = problem.evaluate(&params, &split.val)?;
        let (test, reports) = problem.evaluate(&params, &split.test)?;
        report = GtmReport::mean(&reports);
        let mean = report.unwrap_or(GtmReport::new(0.0, 0.0));
        rows.push(AdaptRow {
            epoch,
            loss_task: train.loss_task,
            loss_holo: train.loss_holo,
            loss_curv: train.loss_curv,
            gtm: mean.gtm,
            val_acc: val.accuracy,
            test_acc: test.accuracy,
            delta_h: mean.delta_h,
            delta_c: mean.delta_c,
            test_loss: test.loss_task,
        });
        if epoch == cfg.epochs {
            break;
        }
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params
            .tensors()
            .into_iter()
            .map(|m| tape.leaf(m.clone()))
            .collect();
        let (loss, _) = problem.loss(&vars, &split.train, cfg.lambda)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Mat> = vars.iter().map(|&v| grads.wrt(v)).collect();
        if !loss.item().is_finite() || g.iter().any(|m| !m.is_finite()) {
            break;
        }
        adam.step(&mut params.tensors_mut(), &g, cfg.learning_rate);
    }
    let test_acc = rows.last().map_or(0.0, |r| r.test_acc);
    Ok(AdaptOutcome {
        params,
        split,
        rows,
        report,
        test_acc,
    })
}

/// GTM of every record with the identity prompt, no training.
pub fn measure_gtm(
    model: &Model,
    dataset: &DomainDataset,
    k: usize,
) -> Result<Vec<GtmReport>, AdaptError> {
    let table = ProtoTable::new(&model.prototypes)?;
    dataset
        .records
        .iter()
        .map(|r| {
            let f = model.frame_values(r)?;
            let graph = TransferGraph::build(&f.z, &table, k);
            Ok(gtm(&graph, &f.g, &table)?)
        })
        .collect()
}
