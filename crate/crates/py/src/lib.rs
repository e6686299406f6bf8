//! Python module `amber_py`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use amber_core::autodiff::Tensor;
use amber_core::dataio::{self, Dataset, SynthConfig};
use amber_core::distlib::{self, RaterVotes, SoftLabel};
use amber_core::evalreport::{self, BinRow, Metrics};
use amber_core::losses;
use amber_core::model::{ModalityId, ModelParams};
use amber_core::trainer::{self, ArchConfig, Objective, RunRecord, TrainConfig};
use amber_core::AmberError;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: AmberError) -> PyErr {
    match e {
        AmberError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label(p: Vec<f64>) -> PyResult<SoftLabel> {
    SoftLabel::new(p).map_err(err)
}

fn modality(name: &str) -> PyResult<ModalityId> {
    name.parse::<ModalityId>().map_err(err)
}

/// Soft label from per-class vote counts.
#[pyfunction]
fn aggregate_votes(counts: Vec<u32>) -> PyResult<Vec<f64>> {
    let votes = RaterVotes::from_counts(counts).map_err(err)?;
    Ok(distlib::aggregate_votes(&votes).probs().to_vec())
}

/// Shannon entropy in bits.
#[pyfunction]
fn entropy_bits(p: Vec<f64>) -> PyResult<f64> {
    Ok(distlib::entropy_bits(&label(p)?))
}

/// Base-2 Jensen–Shannon divergence.
#[pyfunction]
fn js_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    distlib::js_divergence(&label(p)?, &label(q)?).map_err(err)
}

#[pyfunction]
fn bhattacharyya(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    distlib::bhattacharyya(&label(p)?, &label(q)?).map_err(err)
}

/// Reliability weights `softmax(−κ·D)` keyed by modality name.
#[pyfunction]
fn expert_weights(d: BTreeMap<String, f64>, kappa: f64) -> PyResult<BTreeMap<String, f64>> {
    let mut dm = BTreeMap::new();
    for (k, v) in d {
        dm.insert(modality(&k)?, v);
    }
    let u = losses::expert_weights(&dm, kappa).map_err(err)?;
    Ok(u.into_iter().map(|(m, w)| (m.to_string(), w)).collect())
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in m.named() {
        d.set_item(name, v)?;
    }
    Ok(d)
}

fn bins_list<'py>(py: Python<'py>, bins: &[BinRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    bins.iter()
        .map(|b| {
            let d = PyDict::new(py);
            d.set_item("index", b.index)?;
            d.set_item("lo", b.lo)?;
            d.set_item("hi", b.hi)?;
            d.set_item("count", b.count)?;
            match &b.metrics {
                Some(m) => d.set_item("metrics", metrics_dict(py, m)?)?,
                None => d.set_item("metrics", py.None())?,
            }
            Ok(d)
        })
        .collect()
}

/// JS, BC, R², macro-F1, W-F1 and ACC of predictions against soft targets.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, preds: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let m = evalreport::evaluate(&preds, &targets).map_err(err)?;
    metrics_dict(py, &m)
}

/// Metrics per equal-width bin of target entropy.
#[pyfunction]
#[pyo3(signature = (preds, targets, bins=4))]
fn ambiguity_bins<'py>(
    py: Python<'py>,
    preds: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    bins: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = evalreport::ambiguity_bins(&preds, &targets, bins).map_err(err)?;
    bins_list(py, &rows)
}

/// Signed percent improvement; positive is better for every metric.
#[pyfunction]
fn relative_improvement(metric: &str, baseline: f64, candidate: f64) -> Option<f64> {
    evalreport::relative_improvement(metric, baseline, candidate)
}

#[pyclass(name = "Dataset", module = "amber_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::load_jsonl(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    #[getter]
    fn dim_a(&self) -> usize {
        self.inner.dim_a
    }

    #[getter]
    fn dim_t(&self) -> usize {
        self.inner.dim_t
    }

    #[getter]
    fn folds(&self) -> usize {
        self.inner.fold_count
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn soft_labels(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.y.probs().to_vec()).collect()
    }

    /// (h_a rows, h_t rows).
    fn features(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let s = &self.inner.samples;
        (
            s.iter().map(|x| x.h_a.clone()).collect(),
            s.iter().map(|x| x.h_t.clone()).collect(),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, C={}, dim_a={}, dim_t={}, folds={})",
            self.inner.len(),
            self.inner.classes,
            self.inner.dim_a,
            self.inner.dim_t,
            self.inner.fold_count
        )
    }
}

#[pyfunction]
#[pyo3(signature = (
    n_samples=2000, classes=4, dim_a=16, dim_t=16, raters=10, ambiguity_alpha=0.7,
    conflict_rate=0.3, noise_sigma=0.5, folds=5, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    n_samples: usize,
    classes: usize,
    dim_a: usize,
    dim_t: usize,
    raters: u32,
    ambiguity_alpha: f64,
    conflict_rate: f64,
    noise_sigma: f64,
    folds: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = SynthConfig {
        n_samples,
        classes,
        dim_a,
        dim_t,
        raters,
        ambiguity_alpha,
        conflict_rate,
        noise_sigma,
        folds,
        seed,
    };
    Ok(PyDataset {
        inner: dataio::generate_synthetic(&cfg).map_err(err)?,
    })
}

#[pyclass(name = "Model", module = "amber_py", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelParams::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn student(&self) -> String {
        self.inner.config.student.to_string()
    }

    /// Head name → predicted distributions.
    fn predict(&self, h_a: Vec<Vec<f64>>, h_t: Vec<Vec<f64>>) -> PyResult<BTreeMap<String, Vec<Vec<f64>>>> {
        let ha = Tensor::from_rows(&h_a).map_err(err)?;
        let ht = Tensor::from_rows(&h_t).map_err(err)?;
        let p = self.inner.predict(&ha, &ht).map_err(err)?;
        Ok(ModalityId::ALL
            .iter()
            .map(|m| {
                let t = p.get(*m);
                (m.to_string(), (0..t.rows()).map(|i| t.row(i).to_vec()).collect())
            })
            .collect())
    }
}

fn run_dict<'py>(py: Python<'py>, r: &RunRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("run_id", r.run_id())?;
    d.set_item("fold", r.fold)?;
    d.set_item("seed", r.seed)?;
    d.set_item("selected_epoch", r.selected_epoch)?;
    let test = PyDict::new(py);
    for (m, metrics) in &r.test {
        test.set_item(m.to_string(), metrics_dict(py, metrics)?)?;
    }
    d.set_item("test", test)?;
    d.set_item("train_loss", r.epochs.iter().map(|e| e.train.total).collect::<Vec<_>>())?;
    d.set_item("val_js", r.epochs.iter().map(|e| e.val_metrics.js).collect::<Vec<_>>())?;
    d.set_item(
        "model",
        Py::new(
            py,
            PyModel {
                inner: r.best_params.clone(),
            },
        )?,
    )?;
    Ok(d)
}

/// Five-fold × multi-seed training; returns one dict per (fold, seed) run.
#[pyfunction]
#[pyo3(signature = (
    dataset, objective="amber", seeds=vec![0, 1, 2, 3, 4], epochs=30, batch=128, lr=3e-4,
    weight_decay=1e-2, lambda_rai=1.0, lambda_mai=0.5, kappa=4.0, student="at",
    hidden=256, fusion_dim=256, jobs=1
))]
#[allow(clippy::too_many_arguments)]
fn cross_validate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    objective: &str,
    seeds: Vec<u64>,
    epochs: usize,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    lambda_rai: f64,
    lambda_mai: f64,
    kappa: f64,
    student: &str,
    hidden: usize,
    fusion_dim: usize,
    jobs: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = TrainConfig {
        lr,
        weight_decay,
        batch,
        epochs,
        seeds,
        objective: objective.parse::<Objective>().map_err(err)?,
        arch: ArchConfig {
            hidden,
            fusion_dim,
            student: modality(student)?,
        },
        ..TrainConfig::default()
    };
    cfg.loss.lambda_rai = lambda_rai;
    cfg.loss.lambda_mai = lambda_mai;
    cfg.loss.kappa = kappa;
    let ds = &dataset.inner;
    let cv = py
        .detach(|| trainer::cross_validate(ds, &cfg, jobs.max(1)))
        .map_err(err)?;
    cv.runs.iter().map(|r| run_dict(py, r)).collect()
}

#[pymodule]
fn amber_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(aggregate_votes, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(bhattacharyya, m)?)?;
    m.add_function(wrap_pyfunction!(expert_weights, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ambiguity_bins, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
