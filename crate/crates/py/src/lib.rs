//! Python bindings. Matrices cross the boundary as lists of rows, boxes as `BBox` objects or
//! `(x1, y1, x2, y2)` tuples.

use ndarray::Array2;
use opis_core::config::ExperimentConfig;
use opis_core::experiment::{self, ModelSnapshot};
use opis_core::harness::{finite_diff_check, random_case, Method, SupervisionMode, ToyModel};
use opis_core::rng::SamplerRng;
use opis_core::sampler::{self, Candidate};
use opis_core::{midn, reweight, supervision, ImageLabel, OpisError};
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: OpisError) -> PyErr {
    match e {
        OpisError::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        OpisError::Consistency(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "BBox", module = "opis", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(opis_core::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        opis_core::BBox::new(x1, y1, x2, y2).map(PyBBox).map_err(to_py)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1
    }
    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2
    }
    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> PyResult<f64> {
        opis_core::iou(&self.0, &other.0).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }
}

fn bbox(t: (f64, f64, f64, f64)) -> PyResult<opis_core::BBox> {
    opis_core::BBox::new(t.0, t.1, t.2, t.3).map_err(to_py)
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    opis_core::iou(&bbox(a)?, &bbox(b)?).map_err(to_py)
}

/// `dets` holds `(box, score, class_id)` triples; survivors come back in the same form.
#[pyfunction]
fn nms(dets: Vec<((f64, f64, f64, f64), f64, usize)>, iou_threshold: f64) -> PyResult<Vec<((f64, f64, f64, f64), f64, usize)>> {
    let dets = dets
        .into_iter()
        .map(|(b, score, class_id)| Ok(opis_core::ScoredBox { bbox: bbox(b)?, score, class_id }))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(opis_core::nms(&dets, iou_threshold)
        .into_iter()
        .map(|d| ((d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2), d.score, d.class_id))
        .collect())
}

#[pyfunction]
fn softmax_over_classes(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&midn::softmax_over_classes(matrix(x)?.view()).map_err(to_py)?))
}

#[pyfunction]
fn softmax_over_instances(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&midn::softmax_over_instances(matrix(x)?.view()).map_err(to_py)?))
}

/// Composed instance scores and image-level scores for a pair of logit matrices.
#[pyfunction]
fn midn_scores(x_cls: Vec<Vec<f64>>, x_det: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let sc = midn::softmax_over_classes(matrix(x_cls)?.view()).map_err(to_py)?;
    let sd = midn::softmax_over_instances(matrix(x_det)?.view()).map_err(to_py)?;
    let x_r = midn::compose_instance_scores(sc.view(), sd.view()).map_err(to_py)?;
    let y = midn::image_scores(x_r.view()).to_vec();
    Ok((rows(&x_r), y))
}

#[pyfunction]
fn midn_loss(y_pred: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    midn::midn_loss(ndarray::Array1::from(y_pred).view(), &ImageLabel(labels)).map_err(to_py)
}

#[pyfunction]
fn midn_loss_grad(y_pred: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<f64>> {
    Ok(midn::midn_loss_grad(ndarray::Array1::from(y_pred).view(), &ImageLabel(labels))
        .map_err(to_py)?
        .to_vec())
}

/// Cluster centers and per-proposal labels. Returns `(centers, targets)`: centers as
/// `(class, index, score)`, targets as dicts with `status` ("positive" / "negative" /
/// "ignored"), `class` (positives only), `max_iou`, `source_class` and `weight`.
#[pyfunction]
#[pyo3(signature = (proposals, phi_prev, labels, lambda_ig = 0.1, lambda_ng = 0.5))]
fn assign_labels<'py>(
    py: Python<'py>,
    proposals: Vec<(f64, f64, f64, f64)>,
    phi_prev: Vec<Vec<f64>>,
    labels: Vec<bool>,
    lambda_ig: f64,
    lambda_ng: f64,
) -> PyResult<(Vec<(usize, usize, f64)>, Vec<Bound<'py, PyDict>>)> {
    let boxes = proposals.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    let phi = matrix(phi_prev)?;
    let label = ImageLabel(labels);
    let centers = supervision::select_cluster_centers(phi.view(), &label).map_err(to_py)?;
    let (targets, _) =
        supervision::assign_labels(&centers, &boxes, phi.view(), label.num_classes(), lambda_ig, lambda_ng).map_err(to_py)?;
    let mut out = Vec::with_capacity(targets.len());
    for t in &targets.proposals {
        let d = PyDict::new(py);
        match t.status {
            opis_core::Status::Positive(c) => {
                d.set_item("status", "positive")?;
                d.set_item("class", c)?;
            }
            opis_core::Status::Negative => d.set_item("status", "negative")?,
            opis_core::Status::Ignored => d.set_item("status", "ignored")?,
        }
        d.set_item("max_iou", t.max_iou)?;
        d.set_item("source_class", t.source_class)?;
        d.set_item("weight", t.weight)?;
        out.push(d);
    }
    Ok((centers.iter().map(|c| (c.class, c.index, c.score)).collect(), out))
}

#[pyfunction]
fn progressive_t(t_n: usize, t_0: usize, t_1: usize) -> PyResult<f64> {
    sampler::progressive_t(t_n, t_0, t_1).map_err(to_py)
}

#[pyfunction]
fn ratio_mu(mu_s: f64, t: f64) -> PyResult<f64> {
    sampler::ratio_mu(mu_s, t).map_err(to_py)
}

#[pyfunction]
fn neglect_threshold(base: f64, alpha: f64, t_n: usize, t_1: usize) -> PyResult<f64> {
    sampler::neglect_threshold(base, alpha, t_n, t_1).map_err(to_py)
}

/// Two-stage negative reselection over candidates given as `(index, iou)` pairs.
#[pyfunction]
#[pyo3(signature = (negatives, n_pos, mu, seed = 0, lambda_ig = 0.1, lambda_ng = 0.5, n_bins = 4))]
fn sample_negatives<'py>(
    py: Python<'py>,
    negatives: Vec<(usize, f64)>,
    n_pos: usize,
    mu: f64,
    seed: u64,
    lambda_ig: f64,
    lambda_ng: f64,
    n_bins: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let edges = sampler::iou_bin_edges(lambda_ig, lambda_ng, n_bins).map_err(to_py)?;
    let cands: Vec<Candidate> = negatives.into_iter().map(|(index, iou)| Candidate { index, iou }).collect();
    let rng = SamplerRng { seed, scene: 0, iteration: 0, branch: 0, class: 0 };
    let s = sampler::sample_negatives(&cands, n_pos, mu, &edges, &rng).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("selected", s.selected)?;
    d.set_item("target", s.target)?;
    d.set_item("bin_population", s.bin_population)?;
    d.set_item("bin_selected", s.bin_selected)?;
    d.set_item("random_fill", s.random_fill)?;
    d.set_item("capped", s.capped)?;
    Ok(d)
}

#[pyfunction]
fn reselect_positives(positives: Vec<usize>, phi_prev: Vec<Vec<f64>>, class_id: usize, center: usize, threshold: f64) -> PyResult<Vec<usize>> {
    let phi = matrix(phi_prev)?;
    sampler::reselect_positives(&positives, phi.view(), class_id, center, threshold).map_err(to_py)
}

#[pyfunction]
fn reweight_normal(score: f64, iou: f64, beta: f64, center_score: f64) -> PyResult<f64> {
    reweight::reweight_normal(score, iou, beta, center_score).map_err(to_py)
}

#[pyfunction]
fn reweight_attenuated(score: f64, iou: f64, beta: f64, center_score: f64, gamma: f64, progress: f64) -> PyResult<f64> {
    reweight::reweight_attenuated(score, iou, beta, center_score, gamma, progress).map_err(to_py)
}

/// Weighted cross-entropy of one refinement branch. `targets` holds one
/// `(class_or_background, weight)` pair per proposal; background is `num_classes`.
#[pyfunction]
fn refinement_loss(targets: Vec<(usize, f64)>, phi: Vec<Vec<f64>>, zeta: f64) -> PyResult<f64> {
    let phi = matrix(phi)?;
    let num_classes = phi.nrows().checked_sub(1).ok_or_else(|| PyValueError::new_err("empty score matrix"))?;
    let proposals = targets
        .iter()
        .map(|&(c, weight)| {
            let status = if c == num_classes { opis_core::Status::Negative } else { opis_core::Status::Positive(c) };
            opis_core::supervision::ProposalTarget { status, max_iou: 1.0, source_class: c.min(num_classes - 1), weight, selected: true }
        })
        .collect();
    let t = opis_core::SupervisionTargets { num_classes, proposals };
    opis_core::loss::refinement_loss(&t, phi.view(), zeta).map_err(to_py)
}

/// Experiment configuration; see `Config.from_toml` for the text format.
#[pyclass(name = "Config", module = "opis", from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig(ExperimentConfig::default())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text).map(PyConfig).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    /// Copy with `[train]` overrides applied.
    #[pyo3(signature = (seed = None, method = None, iterations = None))]
    fn with_train(&self, seed: Option<u64>, method: Option<&str>, iterations: Option<usize>) -> PyResult<Self> {
        let mut cfg = self.0.clone();
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        if let Some(m) = method {
            cfg.train.method = m.parse::<Method>().map_err(to_py)?;
        }
        if let Some(n) = iterations {
            cfg.train.iterations = n;
        }
        cfg.validate().map_err(to_py)?;
        Ok(PyConfig(cfg))
    }
}

#[pyclass(name = "Model", module = "opis")]
struct PyModel {
    config: ExperimentConfig,
    model: ToyModel,
    trainlog: String,
}

#[pymethods]
impl PyModel {
    /// The per-iteration training log as CSV text.
    #[getter]
    fn trainlog(&self) -> &str {
        &self.trainlog
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    /// mAP, CorLoc and per-class AP on the evaluation scene set.
    #[pyo3(signature = (dataset_seed = None))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset_seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
        let seed = dataset_seed.unwrap_or_else(|| opis_core::config::eval_dataset_seed(self.config.train.seed));
        let (report, _) = experiment::run_evaluation(&self.config, &self.model, seed).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("mAP", report.map)?;
        d.set_item("CorLoc", report.corloc)?;
        d.set_item("per_class_ap", report.per_class_ap.into_iter().collect::<Vec<_>>())?;
        d.set_item("num_detections", report.num_detections)?;
        Ok(d)
    }

    /// JSON snapshot, loadable by the `opis eval` command.
    fn to_json(&self) -> PyResult<String> {
        let snap = ModelSnapshot { config: self.config.clone(), model: self.model.clone() };
        serde_json::to_string(&snap).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Generates the training scenes, trains, and returns the model. Releases the GIL.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<PyModel> {
    let cfg = config.0.clone();
    let run = py.detach(|| experiment::run_training(&cfg)).map_err(to_py)?;
    let mut csv = Vec::new();
    run.log.write_csv(&mut csv).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyModel { config: cfg, model: run.model, trainlog: String::from_utf8(csv).expect("csv is utf-8") })
}

/// Gradient check on a random case; returns the max relative error.
#[pyfunction]
fn gradcheck(seed: u64) -> PyResult<f64> {
    let case = random_case(seed).map_err(to_py)?;
    Ok(finite_diff_check(&case.model, &case.scene, &case.ctx, SupervisionMode::Frozen)
        .map_err(to_py)?
        .max_rel_error)
}

#[pymodule]
fn opis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_over_classes, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_over_instances, m)?)?;
    m.add_function(wrap_pyfunction!(midn_scores, m)?)?;
    m.add_function(wrap_pyfunction!(midn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(midn_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(assign_labels, m)?)?;
    m.add_function(wrap_pyfunction!(progressive_t, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_mu, m)?)?;
    m.add_function(wrap_pyfunction!(neglect_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(sample_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(reselect_positives, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_normal, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_attenuated, m)?)?;
    m.add_function(wrap_pyfunction!(refinement_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
