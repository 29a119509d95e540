//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::PathBuf;

use manifold_glue::adapt::{measure_gtm, run_adapt, GtmReport};
use manifold_glue::checkpoint::Checkpoint;
use manifold_glue::config::{config_hash as hash_value, AdaptConfig, DatasetSource, RunConfig};
use manifold_glue::diff::Tape;
use manifold_glue::gluing::{self, GlueError};
use manifold_glue::graph::{self, save_jsonl, SyntheticSpec, Task};
use manifold_glue::linalg::Mat;
use manifold_glue::pretrain::pretrain as run_pretrain;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn glue_err(e: GlueError) -> PyErr {
    PyArithmeticError::new_err(e.to_string())
}

fn to_mat(rows: Rows) -> PyResult<Mat> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(
            "expected a non-empty rectangular list of rows",
        ));
    }
    Ok(Mat::from_rows(&rows))
}

fn parse_task(task: &str) -> PyResult<Task> {
    serde_json::from_value(serde_json::Value::String(task.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown task `{task}`")))
}

fn report_dict(r: &GtmReport) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("delta_h", r.delta_h),
        ("delta_c", r.delta_c),
        ("gtm", r.gtm),
    ])
}

/// `(G^{1/2}, G^{-1/2})` of an SPD matrix.
#[pyfunction]
fn spd_sqrt(g: Rows) -> PyResult<(Rows, Rows)> {
    let tape = Tape::new();
    let (s, si) = gluing::sqrt_default(tape.constant(to_mat(g)?)).map_err(glue_err)?;
    Ok((s.value().to_rows(), si.value().to_rows()))
}

#[pyfunction]
fn spd_log(g: Rows) -> PyResult<Rows> {
    let tape = Tape::new();
    Ok(gluing::spd_log(tape.constant(to_mat(g)?))
        .map_err(glue_err)?
        .value()
        .to_rows())
}

/// Isometric transport from the tangent space with metric `gi` to the one with `gj`.
#[pyfunction]
fn transport(gi: Rows, gj: Rows) -> PyResult<Rows> {
    let tape = Tape::new();
    let p = gluing::transport(tape.constant(to_mat(gi)?), tape.constant(to_mat(gj)?))
        .map_err(glue_err)?;
    Ok(p.value().to_rows())
}

/// Holonomy around `cycle` (first node repeated at the end).
#[pyfunction]
fn holonomy(metrics: Vec<Rows>, cycle: Vec<usize>) -> PyResult<Rows> {
    if cycle.len() < 2 || cycle.iter().any(|&i| i >= metrics.len()) {
        return Err(PyValueError::new_err(
            "cycle needs two or more valid node indices",
        ));
    }
    let mats = metrics
        .into_iter()
        .map(to_mat)
        .collect::<PyResult<Vec<_>>>()?;
    let edges: Vec<(usize, usize)> = cycle.windows(2).map(|w| (w[0], w[1])).collect();
    let tape = Tape::new();
    let vars: Vec<_> = mats.into_iter().map(|m| tape.constant(m)).collect();
    let mut cache = gluing::GeometryCache::new(&vars);
    let mut transports = HashMap::new();
    for &(i, j) in &edges {
        transports.insert((i, j), cache.transport(i, j).map_err(glue_err)?);
    }
    Ok(gluing::holonomy_map(&cycle, &transports)
        .map_err(glue_err)?
        .value()
        .to_rows())
}

/// `det G_i / det G_j`.
#[pyfunction]
fn curvature_ratio(gi: Rows, gj: Rows) -> PyResult<f64> {
    gluing::curvature_ratio(&to_mat(gi)?, &to_mat(gj)?).map_err(glue_err)
}

#[pyfunction]
fn ricci_estimate(r: f64) -> f64 {
    gluing::ricci_estimate(r)
}

/// Hex SHA-256 of the canonical form of a JSON document.
#[pyfunction]
fn config_hash(json_text: &str) -> PyResult<String> {
    let v: serde_json::Value = serde_json::from_str(json_text).map_err(value_err)?;
    Ok(hash_value(&v))
}

/// Writes one JSONL file per domain and returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, spec_json=None))]
fn gen_synthetic(out_dir: PathBuf, seed: u64, spec_json: Option<&str>) -> PyResult<Vec<PathBuf>> {
    let spec = match spec_json {
        Some(t) => SyntheticSpec::from_json(t).map_err(value_err)?,
        None => SyntheticSpec::reference_suite(),
    };
    let data = graph::gen_synthetic(&spec, seed).map_err(value_err)?;
    std::fs::create_dir_all(&out_dir).map_err(value_err)?;
    data.iter()
        .map(|ds| {
            let p = out_dir.join(format!("{}.jsonl", ds.name));
            save_jsonl(ds, &p).map_err(value_err)?;
            Ok(p)
        })
        .collect()
}

/// A pre-trained model together with its training state.
#[pyclass]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: Checkpoint::load(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.state.epoch
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.state.model.embed_dim()
    }

    #[getter]
    fn manifold_dim(&self) -> usize {
        self.inner.state.model.manifold_dim()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn prototypes(&self) -> Vec<String> {
        self.inner.state.model.prototypes.keys().cloned().collect()
    }

    /// `(z, G)` for every record of a dataset.
    #[pyo3(signature = (dataset, task="graph"))]
    fn embed(&self, dataset: PathBuf, task: &str) -> PyResult<Vec<(Vec<f64>, Rows)>> {
        let ds = DatasetSource::new(dataset, parse_task(task)?)
            .load()
            .map_err(value_err)?;
        ds.records
            .iter()
            .map(|r| {
                let f = self.inner.state.model.frame_values(r).map_err(value_err)?;
                Ok((f.z, f.g.to_rows()))
            })
            .collect()
    }

    /// Per-record transfer metric against the nearest `k` prototypes.
    #[pyo3(signature = (dataset, task="graph", k=2))]
    fn gtm(
        &self,
        dataset: PathBuf,
        task: &str,
        k: usize,
    ) -> PyResult<Vec<HashMap<&'static str, f64>>> {
        if k == 0 {
            return Err(PyValueError::new_err("k must be at least 1"));
        }
        let ds = DatasetSource::new(dataset, parse_task(task)?)
            .load()
            .map_err(value_err)?;
        let reports = measure_gtm(&self.inner.state.model, &ds, k).map_err(value_err)?;
        Ok(reports.iter().map(report_dict).collect())
    }

    /// Few-shot adaptation; `config_json` is an adaptation config object.
    #[pyo3(signature = (dataset, task="graph", config_json="{}"))]
    fn adapt(
        &self,
        dataset: PathBuf,
        task: &str,
        config_json: &str,
    ) -> PyResult<HashMap<&'static str, f64>> {
        let cfg: AdaptConfig = serde_json::from_str(config_json).map_err(value_err)?;
        let ds = DatasetSource::new(dataset, parse_task(task)?)
            .load()
            .map_err(value_err)?;
        let out = run_adapt(&self.inner.state.model, &ds, &cfg).map_err(value_err)?;
        let mut d = out.report.as_ref().map(report_dict).unwrap_or_default();
        d.insert("test_acc", out.test_acc);
        Ok(d)
    }
}

/// Pre-trains on the datasets of a run config (JSON text).
#[pyfunction]
fn pretrain(config_json: &str) -> PyResult<Model> {
    let cfg = RunConfig::from_json(config_json).map_err(value_err)?;
    let datasets = cfg
        .datasets
        .iter()
        .map(|s| s.load())
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    if datasets.is_empty() {
        return Err(PyValueError::new_err("config lists no datasets"));
    }
    let (state, _) = run_pretrain(&datasets, &cfg.pretrain)
        .map_err(|e| PyArithmeticError::new_err(e.to_string()))?;
    let config = serde_json::to_value(&cfg).map_err(value_err)?;
    let inner = Checkpoint {
        state,
        config,
        config_hash: hash_value(&cfg.pretrain),
        seed: cfg.pretrain.seed,
    };
    Ok(Model { inner })
}

#[pymodule]
fn manifold_glue_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spd_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(spd_log, m)?)?;
    m.add_function(wrap_pyfunction!(transport, m)?)?;
    m.add_function(wrap_pyfunction!(holonomy, m)?)?;
    m.add_function(wrap_pyfunction!(curvature_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(ricci_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
