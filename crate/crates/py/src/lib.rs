//! Python bindings: tensors with autodiff, the toy ViT, quantizers, priors,
//! synthesis, PTQ and the full pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use dfqlab::harness::config::RunConfig;
use dfqlab::harness::dataset::gen_toy_dataset;
use dfqlab::harness::eval::{argmax, Classifier};
use dfqlab::priors::{generate_priors_for_item, PriorConfig};
use dfqlab::ptq::{run_ptq, PtqConfig};
use dfqlab::synth::{synthesize_batch, Method, SynthesisConfig};
use dfqlab::vit::{load_checkpoint, save_checkpoint, ViTConfig};

fn err(e: dfqlab::Error) -> PyErr {
    match e {
        dfqlab::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(json_err),
        None => Ok(T::default()),
    }
}

/// Dense f64 tensor with reverse-mode gradients.
#[pyclass(unsendable, name = "Tensor")]
struct PyTensor(dfqlab::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad { dfqlab::Tensor::param(shape, data) } else { dfqlab::Tensor::new(shape, data) };
        t.map(PyTensor).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad()
    }

    fn item(&self) -> f64 {
        self.0.item()
    }

    fn __add__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.add(&o.0).map(PyTensor).map_err(err)
    }

    fn __sub__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.sub(&o.0).map(PyTensor).map_err(err)
    }

    fn __mul__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.mul(&o.0).map(PyTensor).map_err(err)
    }

    fn __matmul__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.matmul(&o.0).map(PyTensor).map_err(err)
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(&shape).map(PyTensor).map_err(err)
    }

    #[pyo3(signature = (axis = None))]
    fn sum(&self, axis: Option<usize>) -> PyResult<Self> {
        match axis {
            Some(a) => self.0.sum_axis(a),
            None => self.0.sum(),
        }
        .map(PyTensor)
        .map_err(err)
    }

    fn softmax(&self, axis: usize) -> PyResult<Self> {
        self.0.softmax(axis).map(PyTensor).map_err(err)
    }

    fn gelu(&self) -> PyResult<Self> {
        self.0.gelu().map(PyTensor).map_err(err)
    }

    fn layer_norm(&self, axis: usize) -> PyResult<Self> {
        self.0.layer_norm(axis, 1e-6).map(PyTensor).map_err(err)
    }

    fn resize_bilinear(&self, height: usize, width: usize) -> PyResult<Self> {
        self.0.resize_bilinear(height, width).map(PyTensor).map_err(err)
    }

    fn round_ste(&self) -> PyResult<Self> {
        self.0.round_ste().map(PyTensor).map_err(err)
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Full-precision toy vision transformer.
#[pyclass(name = "ViTModel")]
struct PyViTModel(dfqlab::vit::ViTModel);

fn image_batch(config: &ViTConfig, images: Vec<f64>) -> PyResult<dfqlab::Tensor> {
    let [c, h, w] = config.image_shape();
    let per = c * h * w;
    if images.is_empty() || !images.len().is_multiple_of(per) {
        return Err(PyValueError::new_err(format!("expected a multiple of {per} standardized values")));
    }
    dfqlab::Tensor::new(vec![images.len() / per, c, h, w], images).map_err(err)
}

fn predict(model: &dyn Classifier, x: &dfqlab::Tensor) -> PyResult<Vec<usize>> {
    let logits = model.logits(x).map_err(err)?;
    let c = logits.shape()[1];
    Ok(logits.data().chunks(c).map(argmax).collect())
}

#[pymethods]
impl PyViTModel {
    /// `config` is a JSON object; missing fields take their defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ViTConfig = parse(config)?;
        dfqlab::vit::ViTModel::init(cfg, seed).map(PyViTModel).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(PyViTModel).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.config).map_err(json_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// Logits `[B * classes]` for flattened standardized images.
    fn logits(&self, images: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = image_batch(&self.0.config, images)?;
        Ok(self.0.logits(&x).map_err(err)?.to_vec())
    }

    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<usize>> {
        predict(&self.0, &image_batch(&self.0.config, images)?)
    }
}

/// Fake-quantized model produced by `quantize`.
#[pyclass(name = "QuantizedModel")]
struct PyQuantizedModel(dfqlab::quant::QuantizedModel);

#[pymethods]
impl PyQuantizedModel {
    #[getter]
    fn wbits(&self) -> u32 {
        self.0.wbits
    }

    #[getter]
    fn abits(&self) -> u32 {
        self.0.abits
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// The quantizer section as JSON.
    fn sites(&self) -> PyResult<String> {
        Ok(self.0.quant_section().map_err(err)?.to_string())
    }

    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<usize>> {
        predict(&self.0, &image_batch(&self.0.model.config, images)?)
    }
}

#[pyfunction]
fn fake_quant_linear(x: f64, scale: f64, zero_point: i64, bits: u32) -> f64 {
    dfqlab::quant::fake_quant_linear(x, scale, zero_point, bits)
}

#[pyfunction]
fn fake_quant_log2(x: f64, scale: f64, bits: u32) -> f64 {
    dfqlab::quant::fake_quant_log2(x, scale, bits)
}

/// `(train_pixels, train_labels, test_pixels, test_labels)`; pixels are
/// `uint8` bytes laid out `[n, 3, 32, 32]`.
#[pyfunction]
fn toy_dataset<'py>(
    py: Python<'py>,
    seed: u64,
    train_n: usize,
    test_n: usize,
) -> PyResult<(Bound<'py, PyBytes>, Vec<usize>, Bound<'py, PyBytes>, Vec<usize>)> {
    let (tr, te) = gen_toy_dataset(seed, train_n, test_n).map_err(err)?;
    Ok((PyBytes::new(py, &tr.images), tr.labels, PyBytes::new(py, &te.images), te.labels))
}

/// Priors for one item: list of `(block, head, x, side, values)`.
#[pyfunction]
#[pyo3(signature = (seed, grid, num_blocks, num_heads, k_apa = 5))]
fn attention_priors(
    seed: u64,
    grid: usize,
    num_blocks: usize,
    num_heads: usize,
    k_apa: usize,
) -> PyResult<Vec<(usize, usize, f64, usize, Vec<f64>)>> {
    let cfg = PriorConfig { grid, num_blocks, num_heads, k_apa };
    let mut r = dfqlab::rng::seeded(seed);
    let set = generate_priors_for_item(&mut r, &cfg).map_err(err)?;
    Ok(set.into_iter().map(|((l, h), p)| (l, h, p.x, p.side, p.values)).collect())
}

#[pyfunction]
#[pyo3(signature = (seed, classes, num_classes = 10, eps1 = 5.0, eps2 = 10.0))]
fn soft_target(seed: u64, classes: Vec<usize>, num_classes: usize, eps1: f64, eps2: f64) -> PyResult<Vec<f64>> {
    let mut r = dfqlab::rng::seeded(seed);
    dfqlab::synth::make_soft_target(&mut r, &classes, num_classes, eps1, eps2).map_err(err)
}

/// `(pixels, labels, manifest_json)`; pixels are raw (not standardized).
#[pyfunction]
#[pyo3(signature = (model, method, config = None))]
fn synthesize(model: &PyViTModel, method: &str, config: Option<&str>) -> PyResult<(Vec<f64>, Vec<usize>, String)> {
    let cfg: SynthesisConfig = parse(config)?;
    let method: Method = method.parse().map_err(err)?;
    let set = synthesize_batch(&model.0, &cfg, method).map_err(err)?;
    let manifest = serde_json::to_string(&set.manifest).map_err(json_err)?;
    Ok((set.pixels, set.labels, manifest))
}

/// Calibrates on standardized `images` and reconstructs block by block.
/// Returns the model and the PTQ report as JSON.
#[pyfunction]
#[pyo3(signature = (model, images, wbits, abits, config = None))]
fn quantize(
    model: &PyViTModel,
    images: Vec<f64>,
    wbits: u32,
    abits: u32,
    config: Option<&str>,
) -> PyResult<(PyQuantizedModel, String)> {
    let cfg: PtqConfig = parse(config)?;
    let x = image_batch(&model.0.config, images)?;
    let (q, report) = run_ptq(&model.0, &x, wbits, abits, &cfg).map_err(err)?;
    Ok((PyQuantizedModel(q), serde_json::to_string(&report).map_err(json_err)?))
}

/// Runs the whole experiment into `out_dir`; returns the report JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn run_pipeline(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<String> {
    let cfg: RunConfig = parse(config)?;
    let report = py.detach(|| dfqlab::harness::pipeline::run_pipeline(&cfg, &out_dir)).map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn pydfqlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    dfqlab::alloc::tune_allocator();
    m.add_class::<PyTensor>()?;
    m.add_class::<PyViTModel>()?;
    m.add_class::<PyQuantizedModel>()?;
    m.add_function(wrap_pyfunction!(fake_quant_linear, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quant_log2, m)?)?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(attention_priors, m)?)?;
    m.add_function(wrap_pyfunction!(soft_target, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
