use std::cell::RefCell;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use manifold_glue::adapt::{adapt_csv, measure_gtm, run_adapt, AdaptError, GtmReport};
use manifold_glue::checkpoint::{describe, Checkpoint, CheckpointError};
use manifold_glue::config::{config_hash, ConfigError, DatasetSource, RunConfig};
use manifold_glue::graph::{
    gen_synthetic as generate, save_jsonl, DataError, DomainDataset, SyntheticSpec, Task,
};
use manifold_glue::pretrain::{init_state, run_pretrain, MetricsRow, PretrainError};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.mgck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ADAPT_METRICS_FILE: &str = "adapt_metrics.csv";
pub const SUITE_FILE: &str = "suite.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

impl CliError {
    /// 2 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Pretrain(
                PretrainError::NonFinite { .. } | PretrainError::Glue(_) | PretrainError::Diff(_),
            )
            | CliError::Adapt(AdaptError::Glue(_) | AdaptError::Diff(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Worker cap from `MANIFOLD_GLUE_THREADS`. Every computation here is
/// serial, so any valid value is honoured.
pub fn check_threads() -> Result<usize, String> {
    match std::env::var("MANIFOLD_GLUE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!(
                "MANIFOLD_GLUE_THREADS must be a positive integer, got `{v}`"
            )),
        },
    }
}

// a closed pipe downstream is not an error worth reporting
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(value: &T) {
    emit(&(serde_json::to_string_pretty(value).expect("output serializes") + "\n"));
}

#[derive(Serialize)]
struct SuiteEntry {
    name: String,
    path: PathBuf,
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    global_edges: Option<PathBuf>,
    records: usize,
    num_classes: usize,
    feature_dim: usize,
}

pub fn gen_synthetic(spec: Option<&Path>, out: &Path, seed: u64) -> Result<(), CliError> {
    let spec = match spec {
        Some(p) => SyntheticSpec::from_json(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => SyntheticSpec::reference_suite(),
    };
    let data = generate(&spec, seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::new();
    for ds in &data {
        let path = out.join(format!("{}.jsonl", ds.name));
        save_jsonl(ds, &path)?;
        let global_edges = match &ds.global_edges {
            Some(edges) => {
                let p = out.join(format!("{}.edges.json", ds.name));
                fs::write(&p, serde_json::to_string(edges).expect("edges serialize"))
                    .map_err(io_err(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(SuiteEntry {
            name: ds.name.clone(),
            path,
            task: ds.task,
            global_edges,
            records: ds.len(),
            num_classes: ds.num_classes,
            feature_dim: ds.feature_dim,
        });
    }
    let manifest = json!({ "seed": seed, "spec": spec, "domains": entries });
    let path = out.join(SUITE_FILE);
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io_err(&path))?;
    print_json(&manifest);
    Ok(())
}

fn load_all(sources: &[DatasetSource]) -> Result<Vec<DomainDataset>, CliError> {
    sources
        .iter()
        .map(|s| s.load().map_err(CliError::from))
        .collect()
}

pub struct PretrainOpts {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub knn_k: Option<usize>,
    pub stop_after: Option<usize>,
}

/// Keeps the header and the rows of finished epochs.
fn metrics_prefix(path: &Path, epochs: usize) -> Result<String, CliError> {
    let mut out = format!("{}\n", MetricsRow::CSV_HEADER);
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < epochs) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn pretrain(opts: PretrainOpts) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.pretrain.seed = seed;
    }
    if let Some(k) = opts.knn_k {
        cfg.pretrain.knn_k = k;
    }
    if let Some(out) = opts.out {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    if cfg.datasets.is_empty() {
        return Err(CliError::Usage("config lists no datasets".into()));
    }
    let datasets = load_all(&cfg.datasets)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    // the hash covers the training configuration only, so output paths can move
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    let hash = config_hash(&cfg.pretrain);
    let mut state = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != hash {
                return Err(CliError::Usage(format!(
                    "{}: written under a different pre-training config",
                    p.display()
                )));
            }
            ck.state
        }
        None => init_state(&datasets, &cfg.pretrain),
    };
    let prefix = if opts.resume.is_some() {
        metrics_prefix(&metrics_path, state.epoch)?
    } else {
        format!("{}\n", MetricsRow::CSV_HEADER)
    };
    fs::write(&metrics_path, prefix).map_err(io_err(&metrics_path))?;

    let wrap = |state: &manifold_glue::pretrain::PretrainState| Checkpoint {
        state: state.clone(),
        config: echo.clone(),
        config_hash: hash.clone(),
        seed: cfg.pretrain.seed,
    };
    let sink_error: RefCell<Option<CliError>> = RefCell::new(None);
    let mut sink = |s: &manifold_glue::pretrain::PretrainState, rows: &[MetricsRow]| {
        if sink_error.borrow().is_some() {
            return;
        }
        let result = (|| -> Result<(), CliError> {
            let mut f = OpenOptions::new()
                .append(true)
                .open(&metrics_path)
                .map_err(io_err(&metrics_path))?;
            let text: String = rows.iter().map(|r| r.csv_line() + "\n").collect();
            f.write_all(text.as_bytes())
                .map_err(io_err(&metrics_path))?;
            f.flush().map_err(io_err(&metrics_path))?;
            wrap(s).save(&ckpt_path)?;
            Ok(())
        })();
        if let Err(e) = result {
            *sink_error.borrow_mut() = Some(e);
        }
    };
    let run = run_pretrain(
        &datasets,
        &cfg.pretrain,
        &mut state,
        opts.stop_after,
        &mut sink,
    );
    if let Some(e) = sink_error.into_inner() {
        return Err(e);
    }
    if let Err(e) = run {
        if !ckpt_path.exists() {
            wrap(&state).save(&ckpt_path)?;
        }
        eprintln!(
            "aborted; last good checkpoint at {} (epoch {})",
            ckpt_path.display(),
            state.epoch
        );
        return Err(e.into());
    }
    print_json(&json!({
        "epochs": state.epoch,
        "checkpoint": ckpt_path,
        "metrics": metrics_path,
        "config_hash": hash,
        "prototypes": state.model.prototypes.keys().collect::<Vec<_>>(),
    }));
    Ok(())
}

pub struct AdaptOpts {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<(PathBuf, Task)>,
    pub shots: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn adapt(opts: AdaptOpts) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(s) = opts.shots {
        cfg.adapt.shots = s;
    }
    if let Some(l) = opts.lambda {
        cfg.adapt.lambda = l;
    }
    if let Some(s) = opts.seed {
        cfg.adapt.seed = s;
    }
    // the checkpoint is found under the configured output directory, not `--out`
    let ckpt_path = opts
        .checkpoint
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    if let Some(out) = opts.out {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    let source = match (opts.dataset, &cfg.target) {
        (Some((path, task)), _) => DatasetSource::new(path, task),
        (None, Some(t)) => t.clone(),
        (None, None) => {
            return Err(CliError::Usage(
                "no target dataset: pass --dataset or set `target`".into(),
            ))
        }
    };
    let target = source.load()?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let outcome = run_adapt(&ck.state.model, &target, &cfg.adapt)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let metrics_path = cfg.out_dir.join(ADAPT_METRICS_FILE);
    fs::write(&metrics_path, adapt_csv(&outcome.rows)).map_err(io_err(&metrics_path))?;
    let report = outcome.report.unwrap_or(GtmReport::new(0.0, 0.0));
    print_json(&json!({
        "test_acc": outcome.test_acc,
        "gtm": report.gtm,
        "delta_h": report.delta_h,
        "delta_c": report.delta_c,
        "train": outcome.split.train.len(),
        "val": outcome.split.val.len(),
        "test": outcome.split.test.len(),
        "metrics": metrics_path,
        "config": cfg.adapt,
    }));
    Ok(())
}

pub fn gtm(checkpoint: &Path, dataset: &Path, task: Task, k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let ds = DatasetSource::new(dataset, task).load()?;
    let reports = measure_gtm(&ck.state.model, &ds, k)?;
    let records: Vec<_> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| json!({ "record": i, "delta_h": r.delta_h, "delta_c": r.delta_c, "gtm": r.gtm }))
        .collect();
    print_json(&json!({ "k": k, "records": records, "mean": GtmReport::mean(&reports) }));
    Ok(())
}

pub fn export_embeddings(
    checkpoint: &Path,
    dataset: &Path,
    task: Task,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = DatasetSource::new(dataset, task).load()?;
    let model = &ck.state.model;
    let (d, m) = (model.embed_dim(), model.manifold_dim());
    let mut csv = String::from("record,domain,label");
    for i in 0..d {
        csv.push_str(&format!(",z_{i}"));
    }
    for i in 0..m {
        csv.push_str(&format!(",g_{i}"));
    }
    csv.push('\n');
    for (i, r) in ds.records.iter().enumerate() {
        let f = model
            .frame_values(r)
            .map_err(|e| CliError::Adapt(e.into()))?;
        let label = r.label.map_or(String::new(), |l| l.to_string());
        csv.push_str(&format!("{i},{},{label}", r.domain));
        for v in f.z.iter().chain(f.g.diagonal().iter()) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    match out {
        Some(p) => fs::write(p, csv).map_err(io_err(p)),
        None => {
            emit(&csv);
            Ok(())
        }
    }
}

pub fn inspect(checkpoint: &Path) -> Result<(), CliError> {
    let bytes = fs::read(checkpoint).map_err(io_err(checkpoint))?;
    let (manifest, _) = Checkpoint::read_manifest(&bytes)?;
    emit(&describe(&manifest));
    Ok(())
}
