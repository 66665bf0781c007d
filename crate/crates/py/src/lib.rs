//! Python bindings for the `icfd` crate.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use icfd::adversary::{self, ScheduleMode, ScheduleParams};
use icfd::checkpoint::load_checkpoint;
use icfd::config::RunConfig;
use icfd::data::{Dataset, DatasetSpec};
use icfd::eval::{evaluate as eval_models, EvalReport};
use icfd::losses;
use icfd::train::EpochRecord;
use icfd::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        Error::Item { .. } | Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn candle_err(e: candle_core::Error) -> PyErr {
    to_py(Error::Tensor(e))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::from_vec(rows.concat(), (n, cols), &Device::Cpu).map_err(candle_err)
}

fn image(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    matrix(rows)?.unsqueeze(0).map_err(candle_err)
}

fn scalar(t: Tensor) -> PyResult<f64> {
    t.to_scalar::<f64>().map_err(candle_err)
}

fn parse_mode(mode: &str) -> PyResult<ScheduleMode> {
    match mode {
        "adaptive" => Ok(ScheduleMode::Adaptive),
        "fixed" => Ok(ScheduleMode::Fixed),
        "off" => Ok(ScheduleMode::Off),
        other => Err(PyValueError::new_err(format!("unknown schedule mode '{other}' (adaptive, fixed, off)"))),
    }
}

fn mode_name(mode: ScheduleMode) -> &'static str {
    match mode {
        ScheduleMode::Adaptive => "adaptive",
        ScheduleMode::Fixed => "fixed",
        ScheduleMode::Off => "off",
    }
}

/// `(sigma + acc) * epsilon`.
#[pyfunction]
fn class_epsilon(acc: f64, sigma: f64, epsilon: f64) -> PyResult<f64> {
    adversary::class_epsilon(acc, sigma, epsilon).map_err(to_py)
}

/// `t / (1 + t)` with `t = (mu + acc) * beta`.
#[pyfunction]
fn class_beta(acc: f64, mu: f64, beta: f64) -> PyResult<f64> {
    adversary::class_beta(acc, mu, beta).map_err(to_py)
}

/// Per-class accuracy, budget and robust weight.
#[pyclass(name = "ClassState", module = "icfd_py", skip_from_py_object)]
#[derive(Clone)]
struct PyClassState {
    inner: adversary::ClassState,
}

#[pymethods]
impl PyClassState {
    #[new]
    #[pyo3(signature = (accuracies, sigma=0.5, epsilon=8.0/255.0, mu=0.5, beta=6.0, mode="adaptive"))]
    fn new(accuracies: Vec<f64>, sigma: f64, epsilon: f64, mu: f64, beta: f64, mode: &str) -> PyResult<Self> {
        let params = ScheduleParams {
            sigma,
            epsilon,
            mu,
            beta,
            mode: parse_mode(mode)?,
        };
        let inner = adversary::ClassState::from_accuracies(accuracies, params).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn accuracies(&self) -> Vec<f64> {
        self.inner.accuracies().to_vec()
    }

    #[getter]
    fn epsilons(&self) -> Vec<f64> {
        self.inner.epsilons().to_vec()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        mode_name(self.inner.params().mode)
    }

    /// New state after an epoch with these adversarial predictions.
    fn update(&self, adv_predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<Self> {
        let inner = adversary::update_class_stats(&adv_predictions, &labels, &self.inner).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "ClassState(accuracies={:?}, epsilons={:?}, betas={:?})",
            self.inner.accuracies(),
            self.inner.epsilons(),
            self.inner.betas()
        )
    }
}

/// Four-neighbour Laplacian of an `H x W` image, replicate borders.
#[pyfunction]
fn laplacian(img: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = losses::laplacian(&image(img)?).map_err(to_py)?;
    out.squeeze(0).and_then(|t| t.to_vec2()).map_err(candle_err)
}

#[pyfunction]
#[pyo3(signature = (x, x_hat, xi=1e-3))]
fn common_loss(x: Vec<Vec<f64>>, x_hat: Vec<Vec<f64>>, xi: f64) -> PyResult<f64> {
    scalar(losses::common_loss(&image(x)?, &image(x_hat)?, xi).map_err(to_py)?)
}

#[pyfunction]
fn specific_loss(scores: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    scalar(losses::specific_loss(&matrix(scores)?, &labels).map_err(to_py)?)
}

/// Batch mean of `KL(softmax(p) || softmax(q))`.
#[pyfunction]
fn kl_divergence(p_logits: Vec<Vec<f64>>, q_logits: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar(losses::kl_divergence(&matrix(p_logits)?, &matrix(q_logits)?).map_err(to_py)?)
}

#[pyfunction]
fn calibrated_at_loss(clean: Vec<Vec<f64>>, adv: Vec<Vec<f64>>, labels: Vec<usize>, class_betas: Vec<f64>) -> PyResult<f64> {
    scalar(losses::calibrated_at_loss(&matrix(clean)?, &matrix(adv)?, &labels, &class_betas).map_err(to_py)?)
}

/// A full run configuration. Build from TOML or mutate the defaults.
#[pyclass(name = "RunConfig", module = "icfd_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_file(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.optim.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.optim.epochs = v;
    }

    #[getter]
    fn output_dir(&self) -> Option<PathBuf> {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, v: Option<PathBuf>) {
        self.inner.output_dir = v;
    }

    #[getter]
    fn backbone(&self) -> String {
        self.inner.classifier.backbone.clone()
    }

    #[setter]
    fn set_backbone(&mut self, v: String) {
        self.inner.classifier.backbone = v;
    }

    #[getter]
    fn schedule_mode(&self) -> &'static str {
        mode_name(self.inner.schedule.mode)
    }

    #[setter]
    fn set_schedule_mode(&mut self, v: &str) -> PyResult<()> {
        self.inner.schedule.mode = parse_mode(v)?;
        Ok(())
    }

    #[getter]
    fn use_decouplers(&self) -> bool {
        self.inner.use_decouplers
    }

    #[setter]
    fn set_use_decouplers(&mut self, v: bool) {
        self.inner.use_decouplers = v;
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.data.synthetic.image_size
    }

    #[setter]
    fn set_image_size(&mut self, v: usize) {
        self.inner.data.synthetic.image_size = v;
    }

    /// Images per synthetic class before the train/test split.
    #[getter]
    fn class_counts(&self) -> Vec<usize> {
        self.inner.data.synthetic.counts.clone()
    }

    #[setter]
    fn set_class_counts(&mut self, v: Vec<usize>) {
        self.inner.data.synthetic.counts = v;
    }

    /// Switch the synthetic data to the imbalanced-difficulty preset.
    fn use_imbalanced_data(&mut self, image_size: usize, per_class: usize, seed: u64) {
        self.inner.data.synthetic = DatasetSpec::imbalanced_difficulty(image_size, per_class, seed);
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, epochs={}, backbone={:?}, mode={:?})",
            self.inner.seed,
            self.inner.optim.epochs,
            self.inner.classifier.backbone,
            self.schedule_mode()
        )
    }
}

fn record_dict<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("l_c", r.l_c)?;
    d.set_item("l_s", r.l_s)?;
    d.set_item("l_at", r.l_at)?;
    d.set_item("total", r.total)?;
    d.set_item("acc", r.acc.clone())?;
    d.set_item("eps", r.eps.clone())?;
    d.set_item("beta", r.beta.clone())?;
    d.set_item("seconds", r.seconds)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("class_names", r.class_names.clone())?;
    d.set_item("per_class", r.per_class.clone())?;
    d.set_item("average", r.average)?;
    d.set_item("macro_average", r.macro_average)?;
    d.set_item("gap", r.gap)?;
    d.set_item("confusion", r.confusion.clone())?;
    Ok(d)
}

fn dataset_dict<'py>(py: Python<'py>, ds: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let pixels: Vec<Vec<f32>> = ds.images().iter().map(|im| im.pixels().to_vec()).collect();
    d.set_item("pixels", pixels)?;
    d.set_item("labels", ds.labels())?;
    d.set_item("height", ds.height())?;
    d.set_item("width", ds.width())?;
    d.set_item("class_names", ds.class_names().to_vec())?;
    Ok(d)
}

/// Trains with `config`; returns per-epoch records, the final class state
/// and the checkpoint path when `output_dir` is set.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = py.detach(move || icfd::train::train(&cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    let records = out.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("records", records)?;
    d.set_item("class_state", PyClassState { inner: out.state.clone() })?;
    d.set_item("class_names", out.class_names.clone())?;
    d.set_item("checkpoint", out.checkpoint.clone())?;
    let split = config.inner.load_data().map_err(to_py)?;
    let report = py.detach(|| eval_models(&out.models, &split.test)).map_err(to_py)?;
    d.set_item("test_report", report_dict(py, &report)?)?;
    Ok(d)
}

/// Evaluates a saved checkpoint on its own test split, or on the data of `config`.
#[pyfunction]
#[pyo3(signature = (checkpoint, config=None))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, config: Option<&PyRunConfig>) -> PyResult<Bound<'py, PyDict>> {
    let data_cfg = config.map(|c| c.inner.clone());
    let report = py
        .detach(move || -> icfd::Result<EvalReport> {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = data_cfg.unwrap_or_else(|| ck.config.clone());
            let split = cfg.load_data()?;
            eval_models(&ck.models, &split.test)
        })
        .map_err(to_py)?;
    report_dict(py, &report)
}

/// Per-class accuracy, micro average and gap from sample and hit counts.
#[pyfunction]
#[pyo3(signature = (counts, correct, class_names=None))]
fn report_from_counts<'py>(
    py: Python<'py>,
    counts: Vec<usize>,
    correct: Vec<usize>,
    class_names: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let names = class_names.unwrap_or_else(|| (0..counts.len()).map(|i| format!("class{i}")).collect());
    let r = EvalReport::from_counts(&counts, &correct, names).map_err(to_py)?;
    report_dict(py, &r)
}

/// Materializes the synthetic split described by `config`.
#[pyfunction]
fn generate_synthetic<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let split = config.inner.load_data().map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("train", dataset_dict(py, &split.train)?)?;
    d.set_item("test", dataset_dict(py, &split.test)?)?;
    Ok(d)
}

#[pymodule]
fn icfd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassState>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(class_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(class_beta, m)?)?;
    m.add_function(wrap_pyfunction!(laplacian, m)?)?;
    m.add_function(wrap_pyfunction!(common_loss, m)?)?;
    m.add_function(wrap_pyfunction!(specific_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(calibrated_at_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    Ok(())
}
