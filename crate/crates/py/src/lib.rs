//! Python bindings: tensors, LIF dynamics, quantization, op counting, energy,
//! exit policies and checkpointed networks.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use qdsnn::ann::arch::Architecture;
use qdsnn::ann::network::BranchyNetwork;
use qdsnn::checkpoint::{self, KIND_ANN, KIND_QTABLE, KIND_SNN};
use qdsnn::energy::{self as en, EnergyConstants};
use qdsnn::exit::{self, ExitRule, ThresholdConfig};
use qdsnn::layer::LayerKind;
use qdsnn::opcount;
use qdsnn::quant::{self, MinMaxObserver, QuantMode};
use qdsnn::rl::{self, Action};
use qdsnn::snn::{self, ResetMode, SpikingNetwork};
use qdsnn::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for qdsnn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

#[pyclass(name = "Tensor", module = "qdsnn_py")]
struct PyTensor(qdsnn::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor(qdsnn::Tensor::new(shape, data).py()?))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor(self.0.clone().reshape(&shape).py()?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "LifConfig", module = "qdsnn_py")]
struct PyLifConfig(snn::LifConfig);

#[pymethods]
impl PyLifConfig {
    #[new]
    #[pyo3(signature = (beta=0.95, theta=1.0, timesteps=32, reset="subtract", init_fraction=0.5))]
    fn new(beta: f64, theta: f64, timesteps: usize, reset: &str, init_fraction: f64) -> PyResult<Self> {
        let reset = match reset {
            "subtract" => ResetMode::Subtract,
            "zero" => ResetMode::Zero,
            other => return Err(PyValueError::new_err(format!("unknown reset mode {other:?}"))),
        };
        let cfg = snn::LifConfig {
            beta,
            theta,
            reset,
            timesteps,
            init_fraction,
        };
        cfg.validate().py()?;
        Ok(PyLifConfig(cfg))
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.0.timesteps
    }

    fn initial_membrane(&self) -> f64 {
        self.0.initial_membrane()
    }

    /// One update of a layer of neurons: returns (spikes, new membrane).
    fn step(&self, membrane: Vec<f64>, current: Vec<f64>) -> PyResult<(Vec<bool>, Vec<f64>)> {
        snn::lif_step(&self.0, &membrane, &current).py()
    }

    /// Spike counts of constant currents driven for `timesteps` steps from the initial membrane.
    fn run(&self, current: Vec<f64>) -> PyResult<Vec<u32>> {
        let mut u = vec![self.0.initial_membrane(); current.len()];
        let mut counts = vec![0u32; current.len()];
        for _ in 0..self.0.timesteps {
            let (s, next) = snn::lif_step(&self.0, &u, &current).py()?;
            for (c, fired) in counts.iter_mut().zip(s) {
                *c += fired as u32;
            }
            u = next;
        }
        Ok(counts)
    }
}

#[pyclass(name = "QParams", module = "qdsnn_py")]
struct PyQParams(quant::QParams);

#[pymethods]
impl PyQParams {
    /// Min/max calibration over `values`.
    #[staticmethod]
    #[pyo3(signature = (values, symmetric=false))]
    fn from_values(values: Vec<f64>, symmetric: bool) -> PyResult<Self> {
        let mut obs = MinMaxObserver::default();
        obs.observe(&values).py()?;
        let mode = if symmetric { QuantMode::Symmetric } else { QuantMode::Asymmetric };
        Ok(PyQParams(quant::compute_qparams(&obs, mode).py()?))
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale
    }

    #[getter]
    fn zero_point(&self) -> i32 {
        self.0.zero_point
    }

    #[getter]
    fn qmin(&self) -> i32 {
        self.0.qmin()
    }

    #[getter]
    fn qmax(&self) -> i32 {
        self.0.qmax()
    }

    fn range(&self) -> (f64, f64) {
        self.0.range()
    }

    fn quantize(&self, x: f64) -> i32 {
        self.0.quantize(x)
    }

    fn dequantize(&self, q: i32) -> f64 {
        self.0.dequantize(q)
    }

    fn fake_quant(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let t = qdsnn::Tensor::from_vec(values).py()?;
        Ok(quant::fake_quant(&t, &self.0).into_data())
    }

    fn __repr__(&self) -> String {
        format!("QParams(scale={}, zero_point={}, mode={:?})", self.0.scale, self.0.zero_point, self.0.mode)
    }
}

#[pyclass(name = "OpCounts", module = "qdsnn_py")]
struct PyOpCounts(opcount::OpCounts);

#[pymethods]
impl PyOpCounts {
    #[new]
    #[pyo3(signature = (n_mac=0, n_ac=0, n_neurons=0, timesteps=0, mem_bytes=0))]
    fn new(n_mac: u64, n_ac: u64, n_neurons: u64, timesteps: u64, mem_bytes: u64) -> Self {
        PyOpCounts(opcount::OpCounts {
            n_mac,
            n_ac,
            n_neurons,
            timesteps,
            n_lif: 2 * n_neurons * timesteps,
            mem_bytes,
            ..Default::default()
        })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    /// Energy in joules of a dense (MAC) inference.
    fn energy_ann<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &en::energy_ann(&self.0, &EnergyConstants::default()))
    }

    /// Energy in joules of a spiking (AC + LIF) inference.
    fn energy_snn<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &en::energy_snn(&self.0, &EnergyConstants::default()))
    }
}

#[pyclass(name = "QTable", module = "qdsnn_py")]
struct PyQTable(rl::QTable);

#[pymethods]
impl PyQTable {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyQTable(checkpoint::load(&path, KIND_QTABLE).py()?))
    }

    /// Table that exits exactly when confidence clears per-exit thresholds.
    #[staticmethod]
    #[pyo3(signature = (thresholds, bins=10))]
    fn from_thresholds(thresholds: Vec<f64>, bins: usize) -> Self {
        PyQTable(rl::QTable::from_thresholds(&thresholds, bins))
    }

    #[getter]
    fn exits(&self) -> usize {
        self.0.exits
    }

    #[getter]
    fn bins(&self) -> usize {
        self.0.bins
    }

    fn q(&self, exit: usize, bin: usize) -> PyResult<(f64, f64)> {
        self.check(exit, bin)?;
        Ok((self.0.q(exit, bin, Action::ExitNow), self.0.q(exit, bin, Action::Continue)))
    }

    /// "exit" or "continue".
    fn greedy(&self, exit: usize, bin: usize) -> PyResult<&'static str> {
        self.check(exit, bin)?;
        Ok(match self.0.greedy(exit, bin) {
            Action::ExitNow => "exit",
            Action::Continue => "continue",
        })
    }

    fn decide(&self, exit: usize, confidence: f64) -> PyResult<bool> {
        self.check(exit, 0)?;
        Ok(ExitRule::decide(&self.0, exit, confidence) == snn::ExitDecision::Exit)
    }

    fn max_abs(&self) -> f64 {
        self.0.max_abs()
    }
}

impl PyQTable {
    fn check(&self, exit: usize, bin: usize) -> PyResult<()> {
        if exit >= self.0.exits || bin >= self.0.bins {
            return Err(PyValueError::new_err(format!(
                "state ({exit}, {bin}) outside {} exits x {} bins",
                self.0.exits, self.0.bins
            )));
        }
        Ok(())
    }
}

#[pyclass(name = "Network", module = "qdsnn_py")]
struct PyNetwork(BranchyNetwork);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork(checkpoint::load(&path, KIND_ANN).py()?))
    }

    #[getter]
    fn exit_count(&self) -> usize {
        self.0.exit_count()
    }

    #[getter]
    fn quantized(&self) -> bool {
        self.0.is_quantized()
    }

    /// Logits of every decision point for a batch of flattened images.
    fn forward(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let shape = self.0.spec.input_shape.clone();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(images.len() * per);
        for img in &images {
            if img.len() != per {
                return Err(PyValueError::new_err(format!("expected {per} pixels, got {}", img.len())));
            }
            data.extend_from_slice(img);
        }
        let mut full = vec![images.len()];
        full.extend(shape);
        let x = qdsnn::Tensor::new(full, data).py()?;
        let outs = self.0.forward_eval(&x).py()?;
        Ok(outs
            .iter()
            .map(|t| {
                let classes = t.shape()[1];
                t.data().chunks(classes).map(|c| c.to_vec()).collect()
            })
            .collect())
    }

    fn profile<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &opcount::profile_network(&self.0.spec.topology()).py()?)
    }
}

#[pyclass(name = "SpikingNetwork", module = "qdsnn_py")]
struct PySpikingNetwork(SpikingNetwork);

#[pymethods]
impl PySpikingNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySpikingNetwork(checkpoint::load(&path, KIND_SNN).py()?))
    }

    #[getter]
    fn exit_count(&self) -> usize {
        self.0.exit_count()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.0.timesteps()
    }

    #[getter]
    fn quantized(&self) -> bool {
        self.0.quantized
    }

    /// Dynamic inference of one flattened image. Exits by `thresholds`, by a
    /// `policy`, or runs to full depth when neither is given.
    #[pyo3(signature = (image, label=0, thresholds=None, policy=None, seed=0, sample_id=0))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        label: usize,
        thresholds: Option<Vec<f64>>,
        policy: Option<PyRef<'_, PyQTable>>,
        seed: u64,
        sample_id: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let profile = self.0.profile().py()?;
        let sample = [(sample_id, image.as_slice(), label)];
        let thr;
        let rule: &dyn ExitRule = match (&thresholds, &policy) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("give thresholds or policy, not both")),
            (Some(t), None) => {
                thr = ThresholdConfig::new(t.clone()).py()?;
                &thr
            }
            (None, Some(p)) => &p.0,
            (None, None) => &exit::AlwaysContinue,
        };
        let (trace, _) = exit::infer_batch(&self.0, &profile, &sample, rule, seed).py()?.remove(0);
        to_py(py, &trace)
    }

    fn savings(&self) -> PyResult<Vec<f64>> {
        exit::savings_table(&self.0.profile().py()?).py()
    }
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    qdsnn::softmax(&logits).py()
}

/// Maximum softmax probability.
#[pyfunction]
fn confidence(logits: Vec<f64>) -> PyResult<f64> {
    exit::confidence(&logits).py()
}

/// Bernoulli rate code of `pixels` in [0, 1]: a (timesteps, pixels) 0/1 matrix.
#[pyfunction]
#[pyo3(signature = (pixels, timesteps, seed=0))]
fn encode_rate(pixels: Vec<f64>, timesteps: usize, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let img = qdsnn::Tensor::from_vec(pixels).py()?;
    let train = snn::encode_rate(&img, timesteps, seed).py()?;
    Ok((0..timesteps).map(|t| train.at(t).to_vec()).collect())
}

/// MACs of a convolution over a (channels, height, width) input.
#[pyfunction]
#[pyo3(signature = (in_channels, out_channels, kernel, input_shape, stride=1, padding=0))]
fn mac_count_conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    input_shape: Vec<usize>,
    stride: usize,
    padding: usize,
) -> PyResult<u64> {
    let layer = LayerKind::conv(in_channels, out_channels, kernel, stride, padding);
    opcount::mac_count_conv(&layer, &input_shape).py()
}

#[pyfunction]
#[pyo3(signature = (in_features, out_features, batch=1))]
fn mac_count_linear(in_features: usize, out_features: usize, batch: u64) -> PyResult<u64> {
    opcount::mac_count_linear(&LayerKind::linear(in_features, out_features), batch).py()
}

/// Static MAC and neuron profile of a built-in architecture.
#[pyfunction]
fn profile<'py>(py: Python<'py>, architecture: &str) -> PyResult<Bound<'py, PyAny>> {
    let arch: Architecture = architecture.parse().py()?;
    to_py(py, &opcount::profile_network(&arch.topology()).py()?)
}

/// `1 - macs(exit) / macs(final)` for every decision point of an architecture.
#[pyfunction]
fn savings(architecture: &str) -> PyResult<Vec<f64>> {
    let arch: Architecture = architecture.parse().py()?;
    exit::savings_table(&opcount::profile_network(&arch.topology()).py()?).py()
}

#[pyfunction]
#[pyo3(signature = (correct, savings, alpha=0.3))]
fn reward(correct: bool, savings: f64, alpha: f64) -> PyResult<f64> {
    rl::reward(correct, savings, alpha).py()
}

/// Published AlexNet operation counts with their modeled energy.
#[pyfunction]
fn reference_energy<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    let consts = EnergyConstants::default();
    let list = PyList::empty(py);
    for row in en::reference::alexnet_rows() {
        let d = PyDict::new(py);
        d.set_item("model", row.model)?;
        d.set_item("counts", to_py(py, &row.counts)?)?;
        d.set_item("published_compute_uj", row.published_compute_uj)?;
        d.set_item("energy", to_py(py, &en::reference::energy(&row, &consts))?)?;
        list.append(d)?;
    }
    Ok(list.into_any())
}

#[pymodule]
fn qdsnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLifConfig>()?;
    m.add_class::<PyQParams>()?;
    m.add_class::<PyOpCounts>()?;
    m.add_class::<PyQTable>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PySpikingNetwork>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(confidence, m)?)?;
    m.add_function(wrap_pyfunction!(encode_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mac_count_conv, m)?)?;
    m.add_function(wrap_pyfunction!(mac_count_linear, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(savings, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(reference_energy, m)?)?;
    Ok(())
}
