//! Python bindings for the cinformer crate: model loading and inference,
//! synthetic data generation, Top-K selection, profiling, and training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cinformer::checkpoint::{load_checkpoint, save_checkpoint, Snapshot};
use cinformer::config::ConfigFile;
use cinformer::dataset;
use cinformer::error::Error;
use cinformer::graph::{Graph, Tensor};
use cinformer::model::{forward, init_model, ModelDims};
use cinformer::nn::{Bound, ParamStore};
use cinformer::profile::profile;
use cinformer::train::{argmax_classes, train_loop};

fn pyerr(e: Error) -> PyErr {
    match &e {
        Error::Config(_) | Error::Usage(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_config(config_json: &str) -> PyResult<ConfigFile> {
    let cfg = ConfigFile::from_json(config_json).map_err(pyerr)?;
    cfg.validate().map_err(pyerr)?;
    Ok(cfg)
}

/// A CINFormer segmentation model: parameters plus the geometry that was
/// used to build them.
#[pyclass]
struct Model {
    params: ParamStore<f32>,
    dims: ModelDims,
    config: ConfigFile,
}

#[pymethods]
impl Model {
    /// Fresh model from a JSON config string (use "{}" for defaults).
    #[new]
    #[pyo3(signature = (config_json="{}", seed=42))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let config = parse_config(config_json)?;
        let dims = ModelDims::from_config(&config).map_err(pyerr)?;
        let params = init_model(&dims, seed);
        Ok(Model {
            params,
            dims,
            config,
        })
    }

    /// Load a model from a binary checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let snap = load_checkpoint(&path).map_err(pyerr)?;
        let dims = ModelDims::from_config(&snap.config).map_err(pyerr)?;
        Ok(Model {
            params: snap.params,
            dims,
            config: snap.config,
        })
    }

    /// Save the model (fresh optimizer state) as a checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let snap = Snapshot {
            params: self.params.clone(),
            opt_m: BTreeMap::new(),
            opt_v: BTreeMap::new(),
            step: 0,
            best: f32::NEG_INFINITY,
            config: self.config.clone(),
        };
        save_checkpoint(&path, &snap).map_err(pyerr)
    }

    /// Total number of parameter scalars.
    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Expected square input side length.
    #[getter]
    fn input_size(&self) -> usize {
        self.dims.input_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    /// Config as a JSON string.
    fn config_json(&self) -> String {
        self.config.to_json()
    }

    fn forward_tensor(&self, pixels: Vec<u8>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let side = self.dims.input_size;
        if pixels.len() != side * side {
            return Err(PyValueError::new_err(format!(
                "expected {} grayscale pixels for a {side}x{side} input, got {}",
                side * side,
                pixels.len()
            )));
        }
        let mut data = Vec::with_capacity(3 * side * side);
        for _ in 0..3 {
            data.extend(pixels.iter().map(|&p| p as f32 / 255.0));
        }
        let image = Tensor::new(vec![1, 3, side, side], data).map_err(pyerr)?;
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &self.params);
        let img = g.constant(image);
        let out = forward(&mut g, &bound, img, &self.dims).map_err(pyerr)?;
        let logits = g.value(out.logits);
        Ok((logits.data.clone(), logits.shape.clone()))
    }

    /// Per-pixel class logits for one grayscale image (row-major u8 pixels).
    /// Returns (flat values, shape [1, classes, H, W]).
    fn logits(&self, pixels: Vec<u8>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        self.forward_tensor(pixels)
    }

    /// Argmax segmentation mask for one grayscale image, flat row-major.
    fn predict(&self, pixels: Vec<u8>) -> PyResult<Vec<u8>> {
        let (data, shape) = self.forward_tensor(pixels)?;
        let logits = Tensor::new(shape, data).map_err(pyerr)?;
        Ok(argmax_classes(&logits))
    }
}

/// Generate the deterministic synthetic defect dataset.
#[pyfunction]
#[pyo3(signature = (dir, count=64, size=64, contrast=0.5, seed=42))]
fn generate_dataset(dir: PathBuf, count: usize, size: usize, contrast: f64, seed: u64) -> PyResult<()> {
    dataset::generate_dataset(&dir, count, size, contrast, seed)
        .map(|_| ())
        .map_err(pyerr)
}

/// Load one sample; returns (image pixels, mask labels, width, height).
#[pyfunction]
fn load_sample(dir: PathBuf, id: &str) -> PyResult<(Vec<u8>, Vec<u8>, usize, usize)> {
    let s = dataset::load_sample(Path::new(&dir), id).map_err(pyerr)?;
    let (w, h) = (s.image.width, s.image.height);
    Ok((s.image.pixels, s.mask.pixels, w, h))
}

/// Variance-ranked Top-K indexes of a flat [N, C] query map.
#[pyfunction]
fn compute_selection(
    q: Vec<f64>,
    n: usize,
    c: usize,
    k_tokens: usize,
    k_channels: usize,
) -> PyResult<(Vec<usize>, Vec<usize>)> {
    if q.len() != n * c {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {n}x{c} map, got {}",
            n * c,
            q.len()
        )));
    }
    let t = Tensor::new(vec![1, n, c], q).map_err(pyerr)?;
    let sel = cinformer::attention::compute_selection(&t, k_tokens, k_channels).map_err(pyerr)?;
    Ok((sel[0].token_indexes.clone(), sel[0].channel_indexes.clone()))
}

/// Parameter and FLOP profile of a config, as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_json="{}"))]
fn profile_json(config_json: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let dims = ModelDims::from_config(&cfg).map_err(pyerr)?;
    serde_json::to_string_pretty(&profile(&dims))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Train a model; returns a dict with final_step, best_miou, last_loss.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, config_json="{}", resume=None))]
fn train<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    out_dir: PathBuf,
    config_json: &str,
    resume: Option<PathBuf>,
) -> PyResult<pyo3::Bound<'py, PyDict>> {
    let cfg = parse_config(config_json)?;
    let outcome = train_loop(&cfg, &data_dir, &out_dir, resume.as_deref()).map_err(pyerr)?;
    let d = PyDict::new(py);
    d.set_item("final_step", outcome.final_step)?;
    d.set_item("best_miou", outcome.best_miou)?;
    d.set_item("last_loss", outcome.last_loss)?;
    Ok(d)
}

/// Run the finite-difference gradient suite; returns
/// [(name, max_rel_err, coords_checked, pass), ...].
#[pyfunction]
#[pyo3(signature = (eps=1e-3, tolerance=1e-4))]
fn gradcheck(eps: f64, tolerance: f64) -> PyResult<Vec<(String, f64, usize, bool)>> {
    let reports = cinformer::gradcheck::run_suite(eps, tolerance).map_err(pyerr)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.name, r.max_rel_err, r.coords_checked, r.pass))
        .collect())
}

#[pymodule]
fn cinformer_py(m: &pyo3::Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_sample, m)?)?;
    m.add_function(wrap_pyfunction!(compute_selection, m)?)?;
    m.add_function(wrap_pyfunction!(profile_json, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
