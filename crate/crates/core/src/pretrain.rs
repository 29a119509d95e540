//! Three-stage pre-training: local contrastive construction, gluing over a
//! cross-dataset KNN skeleton, and per-dataset refinement.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PretrainConfig};
use crate::diff::{concat_rows, DiffError, Reduce, Tape, Var};
use crate::encoder::EncoderVars;
use crate::frame::{project_features, FrameContext, FramedEmbedding, FramedVars};
use crate::gluing::{curvature_loss, holonomy_loss, spd_log, GlueError, TrianglePath};
use crate::graph::{make_batches, DomainDataset, GraphBatch, GraphRecord};
use crate::linalg::Mat;
use crate::model::{cosine_lr, Adam, Model};
use crate::prototypes::{normalize_rows, proto_contrastive_loss, ProtoError, RiemannianPrototype};
use crate::rng;

/// Logit added to self-similarities so they drop out of the softmax.
const SELF_MASK: f64 = -1e9;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("no pre-training records")]
    NoData,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite {loss} at epoch {epoch}, stage {stage}, batch {batch}")]
    NonFinite {
        epoch: usize,
        stage: u8,
        batch: usize,
        loss: &'static str,
    },
    #[error(transparent)]
    Glue(#[from] GlueError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Undirected KNN graph over batch members, edges stored as `(a, b)` with
/// `a < b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    pub fn new(num_nodes: usize, mut edges: Vec<(usize, usize)>) -> Self {
        for e in &mut edges {
            assert!(
                e.0 != e.1 && e.0.max(e.1) < num_nodes,
                "contract violation: bad skeleton edge {e:?}"
            );
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        SkeletonGraph { num_nodes, edges }
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        for list in &mut nb {
            list.sort_unstable();
        }
        nb
    }
}

/// Symmetric InfoNCE over `2B` views: each row's positive is the other view
/// of the same record, every other view is a negative.
pub fn local_contrastive_loss<'t>(
    z1: Var<'t>,
    z2: Var<'t>,
    temperature: f64,
) -> Result<Var<'t>, DiffError> {
    assert!(
        temperature > 0.0,
        "contract violation: temperature must be positive"
    );
    assert_eq!(
        z1.shape(),
        z2.shape(),
        "contract violation: view shapes differ"
    );
    let b = z1.shape().0;
    assert!(
        b >= 2,
        "contract violation: contrastive loss needs at least 2 records"
    );
    let tape = z1.tape();
    let n = 2 * b;
    let z = normalize_rows(concat_rows(&[z1, z2]))?;
    let mut mask = Mat::zeros(n, n);
    let mut pos = Mat::zeros(n, n);
    for i in 0..n {
        mask.set(i, i, SELF_MASK);
        pos.set(i, (i + b) % n, 1.0);
    }
    let logits = z.matmul(z.t()) * (1.0 / temperature) + tape.constant(mask);
    // log-sum-exp with a constant row shift; the shift cancels in the gradient
    let lv = logits.value();
    let shift = Mat::from_fn(n, n, |i, _| {
        lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    let shifted = logits - tape.constant(shift);
    let lse = shifted.exp().sum_along(Reduce::Cols).ln()?;
    let positive = (shifted * tape.constant(pos)).sum_along(Reduce::Cols);
    Ok((lse - positive).mean())
}

/// Euclidean KNN with every point's `k` nearest others, ties to the lower
/// index, kept if either endpoint selects the edge.
pub fn knn_graph(points: &[Vec<f64>], k: usize) -> SkeletonGraph {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist(&points[i], &points[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(others.into_iter().take(k).map(|(_, j)| (i, j)));
    }
    SkeletonGraph::new(n, edges)
}

/// KNN skeleton over a mixed batch in `z`-space, ignoring domains.
pub fn cross_dataset_knn(frames: &[FramedEmbedding], k: usize) -> SkeletonGraph {
    let points: Vec<Vec<f64>> = frames.iter().map(|f| f.z.clone()).collect();
    knn_graph(&points, k)
}

/// Adjacent-edge pairs `(a, j, b)`: the centre `j` is drawn with weight
/// `deg(deg−1)/2`, then an unordered neighbour pair uniformly.
pub fn sample_triangle_paths(
    skeleton: &SkeletonGraph,
    n_samples: usize,
    seed: u64,
) -> Vec<TrianglePath> {
    let nb = skeleton.neighbors();
    let weights: Vec<u64> = nb
        .iter()
        .map(|l| (l.len() * l.len().saturating_sub(1) / 2) as u64)
        .collect();
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut rng = rng::stream(seed, &[rng::tag("triangles")]);
    (0..n_samples)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            let j = weights
                .iter()
                .position(|&w| {
                    if r < w {
                        true
                    } else {
                        r -= w;
                        false
                    }
                })
                .expect("weights sum to total");
            let d = nb[j].len();
            let x = rng.random_range(0..d);
            let mut y = rng.random_range(0..d - 1);
            if y >= x {
                y += 1;
            }
            let (a, b) = (nb[j][x.min(y)], nb[j][x.max(y)]);
            TrianglePath::new(a, j, b)
        })
        .collect()
}

/// Seeded view: each edge dropped with probability `edge_drop`, each feature
/// column zeroed with probability `feature_mask`.
pub fn augment(
    record: &GraphRecord,
    edge_drop: f64,
    feature_mask: f64,
    rng: &mut ChaCha8Rng,
) -> GraphRecord {
    let edges = record
        .canonical_edges()
        .into_iter()
        .filter(|_| rng.random::<f64>() >= edge_drop)
        .collect();
    let keep: Vec<bool> = (0..record.feature_dim())
        .map(|_| rng.random::<f64>() >= feature_mask)
        .collect();
    let features = record
        .features
        .iter()
        .map(|row| {
            row.iter()
                .zip(&keep)
                .map(|(&x, &k)| if k { x } else { 0.0 })
                .collect()
        })
        .collect();
    GraphRecord {
        num_nodes: record.num_nodes,
        edges,
        features,
        label: record.label,
        domain: record.domain.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: u8,
    pub batch: usize,
    pub loss_local: f64,
    pub loss_proto: f64,
    pub loss_holo: f64,
    pub loss_curv: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "epoch,stage,batch,loss_local,loss_proto,loss_holo,loss_curv,loss_total,lr,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.batch,
            self.loss_local,
            self.loss_proto,
            self.loss_holo,
            self.loss_curv,
            self.loss_total,
            self.lr,
            self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Everything needed to continue training: parameters, prototypes,
/// optimizer moments and the number of finished epochs. Random streams are
/// derived from `(seed, epoch, stage, batch)`, so no generator state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
}

pub fn init_state(datasets: &[DomainDataset], cfg: &PretrainConfig) -> PretrainState {
    let mut model = Model::init(cfg.dims(), cfg.length_mode, cfg.seed);
    for ds in datasets {
        model.ensure_projection(ds.feature_dim);
    }
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
    PretrainState {
        model,
        adam: Adam::new(&shapes),
        epoch: 0,
    }
}

/// Optimizer slots per epoch: two passes over the mixed batches plus one
/// over each dataset's own batches.
pub fn steps_per_epoch(datasets: &[DomainDataset], batch_size: usize) -> usize {
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    2 * total.div_ceil(batch_size)
        + datasets
            .iter()
            .map(|d| d.len().div_ceil(batch_size))
            .sum::<usize>()
}

#[derive(Default)]
struct Losses<'t> {
    local: Option<Var<'t>>,
    proto: Option<Var<'t>>,
    holo: Option<Var<'t>>,
    curv: Option<Var<'t>>,
}

struct Trainer<'a> {
    datasets: &'a [DomainDataset],
    cfg: &'a PretrainConfig,
    total_steps: u64,
    steps_per_epoch: u64,
}

impl Trainer<'_> {
    fn leaves<'t>(&self, model: &Model, tape: &'t Tape) -> (EncoderVars<'t>, Var<'t>) {
        (
            model.encoder.on(tape, true),
            tape.leaf(model.bank.p.clone()),
        )
    }

    fn frames<'t>(
        &self,
        model: &Model,
        ctx: &FrameContext<'_, 't>,
        batch: &GraphBatch,
        tags: [u64; 3],
    ) -> Result<Vec<FramedVars<'t>>, PretrainError> {
        let mut out = Vec::with_capacity(batch.len());
        for (i, rec) in batch.records.iter().enumerate() {
            let x = project_features(rec, &model.projections[&rec.feature_dim()]);
            let mut drop = rng::stream(
                self.cfg.seed,
                &[rng::tag("dropout"), tags[0], tags[1], tags[2], i as u64],
            );
            out.push(ctx.frame(rec, &x, Some(&mut drop))?);
        }
        Ok(out)
    }

    /// Weighted sum, finiteness check, backward and Adam step. Returns the
    /// metrics row; the state is untouched when anything is non-finite.
    fn step(
        &self,
        state: &mut PretrainState,
        tape: &Tape,
        leaves: &(EncoderVars<'_>, Var<'_>),
        losses: Losses<'_>,
        at: (usize, u8, usize, usize),
        started: Instant,
    ) -> Result<MetricsRow, PretrainError> {
        let (epoch, stage, batch, slot) = at;
        let w = self.cfg.loss_weights;
        let lr = cosine_lr(
            self.cfg.learning_rate,
            epoch as u64 * self.steps_per_epoch + slot as u64,
            self.total_steps,
        );
        let parts = [
            ("loss_local", losses.local, w.local),
            ("loss_proto", losses.proto, w.proto),
            ("loss_holo", losses.holo, w.holo),
            ("loss_curv", losses.curv, w.curv),
        ];
        let mut values = [0.0; 4];
        let mut total: Option<Var<'_>> = None;
        for (slot, (name, v, weight)) in parts.into_iter().enumerate() {
            let Some(v) = v else { continue };
            values[slot] = v.item();
            if !values[slot].is_finite() {
                return Err(PretrainError::NonFinite {
                    epoch,
                    stage,
                    batch,
                    loss: name,
                });
            }
            let term = v * weight;
            total = Some(match total {
                None => term,
                Some(t) => t + term,
            });
        }
        let loss_total = total.map_or(0.0, |t| t.item());
        if let Some(total) = total {
            let grads = tape.backward(total)?;
            let (enc, bank) = leaves;
            let g = [
                grads.wrt(enc.w1),
                grads.wrt(enc.b1),
                grads.wrt(enc.w2),
                grads.wrt(enc.b2),
                grads.wrt(*bank),
            ];
            if g.iter().any(|m| !m.is_finite()) {
                return Err(PretrainError::NonFinite {
                    epoch,
                    stage,
                    batch,
                    loss: "gradient",
                });
            }
            let PretrainState { model, adam, .. } = state;
            adam.step(&mut model.params_mut(), &g, lr);
        }
        Ok(MetricsRow {
            epoch,
            stage,
            batch,
            loss_local: values[0],
            loss_proto: values[1],
            loss_holo: values[2],
            loss_curv: values[3],
            loss_total,
            lr,
            wall_ms: if self.cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    fn stage1(
        &self,
        state: &mut PretrainState,
        batch: &GraphBatch,
        epoch: usize,
        b: usize,
        slot: usize,
    ) -> Result<MetricsRow, PretrainError> {
        let started = Instant::now();
        let cfg = self.cfg;
        let tape = Tape::new();
        let leaves = self.leaves(&state.model, &tape);
        let model = &state.model;
        let ctx = FrameContext {
            enc: &leaves.0,
            bank: leaves.1,
            k: model.bank.k,
            length_mode: model.length_mode,
        };
        let mut views: [Vec<Var<'_>>; 2] = [Vec::new(), Vec::new()];
        let mut clean = Vec::with_capacity(batch.len());
        for (i, rec) in batch.records.iter().enumerate() {
            let proj = &model.projections[&rec.feature_dim()];
            for (v, view) in views.iter_mut().enumerate() {
                let tags = [epoch as u64, 1, b as u64, i as u64, v as u64];
                let mut arng = rng::stream(cfg.seed, &[&[rng::tag("augment")], &tags[..]].concat());
                let aug = augment(rec, cfg.edge_drop, cfg.feature_mask, &mut arng);
                let mut drng = rng::stream(cfg.seed, &[&[rng::tag("dropout")], &tags[..]].concat());
                view.push(
                    ctx.frame(&aug, &project_features(&aug, proj), Some(&mut drng))?
                        .z,
                );
            }
            clean.push(ctx.frame(rec, &project_features(rec, proj), None)?);
        }
        let mut losses = Losses::default();
        if batch.len() >= 2 && cfg.loss_weights.local > 0.0 {
            losses.local = Some(local_contrastive_loss(
                concat_rows(&views[0]),
                concat_rows(&views[1]),
                cfg.temperature,
            )?);
        }
        if epoch >= cfg.warmup_epochs && cfg.loss_weights.proto > 0.0 {
            let known: Vec<usize> = (0..batch.len())
                .filter(|&i| model.prototypes.contains_key(&batch.records[i].domain))
                .collect();
            if !known.is_empty() {
                let z = concat_rows(&known.iter().map(|&i| clean[i].z).collect::<Vec<_>>());
                let domains: Vec<&str> = known
                    .iter()
                    .map(|&i| batch.records[i].domain.as_str())
                    .collect();
                losses.proto = Some(proto_contrastive_loss(
                    z,
                    &domains,
                    &model.prototypes,
                    cfg.temperature,
                )?);
            }
        }
        // prototype targets come from the pre-step parameters
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, rec) in batch.records.iter().enumerate() {
            groups.entry(rec.domain.as_str()).or_default().push(i);
        }
        let value_tape = Tape::new();
        let mut targets = Vec::new();
        for (domain, idx) in groups {
            let n = idx.len() as f64;
            let d = model.embed_dim();
            let m = model.manifold_dim();
            let mut z_mean = vec![0.0; d];
            let mut log_mean = Mat::zeros(m, m);
            for &i in &idx {
                for (acc, v) in z_mean.iter_mut().zip(clean[i].z.value().as_slice()) {
                    *acc += v / n;
                }
                let log = spd_log(value_tape.constant(clean[i].g.value().as_ref().clone()))?;
                log_mean.add_assign(&log.value().scale(1.0 / n));
            }
            targets.push((domain.to_string(), z_mean, log_mean));
        }
        let row = self.step(state, &tape, &leaves, losses, (epoch, 1, b, slot), started)?;
        let (d, m) = (state.model.embed_dim(), state.model.manifold_dim());
        for (domain, z_mean, log_mean) in targets {
            state
                .model
                .prototypes
                .entry(domain.clone())
                .or_insert_with(|| RiemannianPrototype::new(domain, d, m))
                .ema_update(&z_mean, &log_mean, cfg.beta_ema);
        }
        Ok(row)
    }

    /// Stages 2 and 3: holonomy and curvature losses along a skeleton over
    /// freshly computed frames. `fixed_edges` replaces the KNN skeleton.
    fn glue_stage(
        &self,
        state: &mut PretrainState,
        batch: &GraphBatch,
        fixed_edges: Option<Vec<(usize, usize)>>,
        at: (usize, u8, usize, usize),
    ) -> Result<MetricsRow, PretrainError> {
        let started = Instant::now();
        let (epoch, stage, b, _) = at;
        let tape = Tape::new();
        let leaves = self.leaves(&state.model, &tape);
        let mut losses = Losses::default();
        let w = self.cfg.loss_weights;
        if batch.len() >= 3 && (w.holo > 0.0 || w.curv > 0.0) {
            let model = &state.model;
            let ctx = FrameContext {
                enc: &leaves.0,
                bank: leaves.1,
                k: model.bank.k,
                length_mode: model.length_mode,
            };
            let frames = self.frames(model, &ctx, batch, [epoch as u64, stage as u64, b as u64])?;
            let skeleton = match fixed_edges {
                Some(edges) => SkeletonGraph::new(batch.len(), edges),
                None => {
                    let points: Vec<Vec<f64>> = frames
                        .iter()
                        .map(|f| f.z.value().as_slice().to_vec())
                        .collect();
                    knn_graph(&points, self.cfg.knn_k)
                }
            };
            let seed = rng::derive_seed(self.cfg.seed, &[epoch as u64, stage as u64, b as u64]);
            let paths = sample_triangle_paths(&skeleton, self.cfg.n_triangle_samples, seed);
            if !paths.is_empty() {
                let metrics: Vec<Var<'_>> = frames.iter().map(|f| f.g).collect();
                if w.holo > 0.0 {
                    losses.holo = Some(holonomy_loss(&paths, &metrics)?);
                }
                if w.curv > 0.0 {
                    losses.curv = Some(curvature_loss(&paths, &metrics)?);
                }
            }
        }
        self.step(state, &tape, &leaves, losses, at, started)
    }

    fn epoch(&self, state: &mut PretrainState) -> Result<Vec<MetricsRow>, PretrainError> {
        let epoch = state.epoch;
        let bs = self.cfg.batch_size;
        let mixed = make_batches(
            self.datasets,
            bs,
            rng::derive_seed(self.cfg.seed, &[rng::tag("mix"), epoch as u64]),
        );
        let mut rows = Vec::new();
        let mut slot = 0;
        for (b, batch) in mixed.iter().enumerate() {
            rows.push(self.stage1(state, batch, epoch, b, slot)?);
            slot += 1;
        }
        for (b, batch) in mixed.iter().enumerate() {
            rows.push(self.glue_stage(state, batch, None, (epoch, 2, b, slot))?);
            slot += 1;
        }
        let mut b = 0;
        for (di, ds) in self.datasets.iter().enumerate() {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng::stream(
                self.cfg.seed,
                &[rng::tag("refine"), epoch as u64, di as u64],
            ));
            for chunk in order.chunks(bs) {
                let batch = GraphBatch::from_dataset(ds, di, chunk);
                let fixed = ds.global_edges.as_ref().map(|edges| {
                    let pos: BTreeMap<usize, usize> =
                        chunk.iter().enumerate().map(|(p, &r)| (r, p)).collect();
                    edges
                        .iter()
                        .filter_map(|(a, c)| Some((*pos.get(a)?, *pos.get(c)?)))
                        .collect()
                });
                rows.push(self.glue_stage(state, &batch, fixed, (epoch, 3, b, slot))?);
                slot += 1;
                b += 1;
            }
        }
        state.epoch += 1;
        Ok(rows)
    }
}

/// Runs epochs `state.epoch..until` (all remaining when `until` is `None`),
/// calling `sink` after each finished epoch with that epoch's rows. On error
/// `state` holds the last good parameters.
pub fn run_pretrain(
    datasets: &[DomainDataset],
    cfg: &PretrainConfig,
    state: &mut PretrainState,
    until: Option<usize>,
    sink: &mut dyn FnMut(&PretrainState, &[MetricsRow]),
) -> Result<Vec<MetricsRow>, PretrainError> {
    cfg.validate()?;
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(PretrainError::NoData);
    }
    let spe = steps_per_epoch(datasets, cfg.batch_size) as u64;
    let trainer = Trainer {
        datasets,
        cfg,
        total_steps: spe * cfg.epochs as u64,
        steps_per_epoch: spe,
    };
    let end = until.map_or(cfg.epochs, |u| u.min(cfg.epochs));
    let mut all = Vec::new();
    while state.epoch < end {
        let mut backup = state.clone();
        let rows = trainer.epoch(&mut backup)?;
        *state = backup;
        sink(state, &rows);
        all.extend(rows);
    }
    Ok(all)
}

/// Fresh run over all epochs.
pub fn pretrain(
    datasets: &[DomainDataset],
    cfg: &PretrainConfig,
) -> Result<(PretrainState, Vec<MetricsRow>), PretrainError> {
    let mut state = init_state(datasets, cfg);
    let rows = run_pretrain(datasets, cfg, &mut state, None, &mut |_, _| {})?;
    Ok((state, rows))
}
