//! Python bindings for the `mfdconv` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mfdconv::config::RunConfig;
use mfdconv::diagnostics::{variant_grad_check, LAYER_TOLERANCE};
use mfdconv::dynconv::ConvVariant;
use mfdconv::eval::{collar_f1 as score_collar, CollarParams, Event, EventList};
use mfdconv::features::{load_wav, synth_generate, LogMelConfig, LogMelExtractor, Split, SplitCounts, SynthConfig};
use mfdconv::ssl::{make_pseudo_labels, median_filter as filter, FrameGate, MedianFilterSpec, Thresholds};
use mfdconv::train::{train as run_training, TrainedModel};
use mfdconv::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense row-major `f64` array.
#[pyclass(name = "Tensor", module = "mfdconv_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: mfdconv::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: mfdconv::Tensor::new(&shape, data).map_err(py_err)? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat copy of the values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: mfdconv::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// A trained CRNN loaded from a checkpoint.
#[pyclass(name = "Model", module = "mfdconv_py")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainedModel::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    /// Log-mel features of an audio file, as the model expects them.
    fn features(&self, path: PathBuf) -> PyResult<PyTensor> {
        self.inner.clip_features(&path).map(wrap).map_err(py_err)
    }

    /// Frame-level and clip-level probabilities for one feature matrix.
    fn predict(&self, features: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let p = self.inner.model.predict(&self.inner.store, &features.inner).map_err(py_err)?;
        Ok((wrap(p.strong), wrap(p.weak)))
    }

    /// Attention maps of one conv block: keys `alpha_w`, `alpha_f`, `alpha_c`
    /// for the enabled branches.
    fn attention_maps<'py>(&self, py: Python<'py>, features: &PyTensor, layer: usize) -> PyResult<Bound<'py, PyDict>> {
        let maps = self.inner.model.attention_maps(&self.inner.store, &features.inner, layer).map_err(py_err)?;
        let out = PyDict::new(py);
        for ((name, t), on) in [("alpha_w", maps.alpha_w), ("alpha_f", maps.alpha_f), ("alpha_c", maps.alpha_c)]
            .into_iter()
            .zip(maps.enabled)
        {
            if on {
                out.set_item(name, wrap(t))?;
            }
        }
        Ok(out)
    }

    /// Scores a corpus split; returns PSDS1-like, PSDS2-like and collar F1.
    #[pyo3(signature = (data, split = "validation"))]
    fn evaluate(&self, data: PathBuf, split: &str) -> PyResult<(f64, f64, f64)> {
        let split: Split = split.parse().map_err(py_err)?;
        Ok(self.inner.evaluate(&data, split).map_err(py_err)?.summary())
    }
}

/// Log-mel spectrogram (`frames × n_mels`) of a WAV file.
#[pyfunction]
#[pyo3(signature = (path, n_mels = 128))]
fn log_mel(path: PathBuf, n_mels: usize) -> PyResult<PyTensor> {
    let cfg = LogMelConfig { n_mels, ..LogMelConfig::default() };
    let clip = load_wav(&path).map_err(py_err)?;
    let spec = LogMelExtractor::new(cfg).and_then(|ex| ex.extract(&clip)).map_err(py_err)?;
    Ok(wrap(spec.frames))
}

/// Writes a synthetic corpus and returns its summary.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, clips_per_split = 10, classes = 4, clip_seconds = 10.0))]
fn synth_data(out: PathBuf, seed: u64, clips_per_split: usize, classes: usize, clip_seconds: f64) -> PyResult<String> {
    let cfg = SynthConfig {
        seed,
        counts: SplitCounts::uniform(clips_per_split),
        classes,
        clip_seconds,
        ..SynthConfig::default()
    };
    Ok(synth_generate(&cfg, &out).map_err(py_err)?.describe())
}

/// Trains from a config file; returns the checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn train(config: PathBuf, overrides: Vec<String>) -> PyResult<PathBuf> {
    let text = std::fs::read_to_string(&config).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let cfg = RunConfig::from_text(&text, &overrides).map_err(py_err)?;
    run_training(&cfg).map_err(py_err)?;
    Ok(cfg.out.join(mfdconv::train::CHECKPOINT_FILE))
}

/// Finite-difference check of one conv variant: `(max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (variant, seed = 0))]
fn grad_check(variant: &str, seed: u64) -> PyResult<(f64, bool)> {
    let variant: ConvVariant = variant.parse().map_err(py_err)?;
    let r = variant_grad_check(variant, seed, None).map_err(py_err)?;
    Ok((r.max_rel_error, r.passes(LAYER_TOLERANCE)))
}

/// Binary median filter with an odd window that shrinks at the edges.
#[pyfunction]
fn median_filter(seq: Vec<u8>, window: usize) -> PyResult<Vec<u32>> {
    // a Vec<u8> would come back as `bytes`
    Ok(filter(&seq, window).map_err(py_err)?.into_iter().map(u32::from).collect())
}

/// Thresholded, gated and smoothed teacher labels `(clip, frame)`.
#[pyfunction]
#[pyo3(signature = (weak, strong, phi_clip = 0.5, phi_frame = 0.5, window = 1))]
fn pseudo_labels(weak: &PyTensor, strong: &PyTensor, phi_clip: f64, phi_frame: f64, window: usize) -> PyResult<(PyTensor, PyTensor)> {
    let th = Thresholds::new(phi_clip, phi_frame).map_err(py_err)?;
    let k = weak.inner.numel();
    let mf = MedianFilterSpec::uniform(k, window).map_err(py_err)?;
    let (w, s) = make_pseudo_labels(&weak.inner, &strong.inner, th, &mf, FrameGate::Clip).map_err(py_err)?;
    Ok((wrap(w), wrap(s)))
}

fn events(list: Vec<(f64, f64, usize)>) -> PyResult<EventList> {
    let evs = list.into_iter().map(|(on, off, c)| Event::new(on, off, c)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    EventList::new(evs).map_err(py_err)
}

/// Macro collar F1 between `(onset, offset, class)` lists.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, collar = 0.2, offset_fraction = 0.2))]
fn collar_f1(reference: Vec<(f64, f64, usize)>, hypothesis: Vec<(f64, f64, usize)>, collar: f64, offset_fraction: f64) -> PyResult<f64> {
    let params = CollarParams { collar, offset_fraction };
    Ok(score_collar(&events(reference)?, &events(hypothesis)?, params).macro_f1)
}

#[pymodule]
fn mfdconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(collar_f1, m)?)?;
    Ok(())
}
