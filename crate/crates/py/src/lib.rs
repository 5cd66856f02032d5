//! Python bindings: model construction, embedding, cost reports,
//! evaluation and the command-line interface.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use osnet::analysis::{count_params, shrink_grid, GRID_STEPS};
use osnet::arch::{build_model, receptive_field as rf, NetworkSpec, OSNetModel};
use osnet::checkpoint::Checkpoint;
use osnet::data::{normalize, IMAGENET_MEAN, IMAGENET_STD};
use osnet::eval::{evaluate as eval_distmat, DistMat, Labels};
use osnet::params::ParamStore;
use osnet::train::l2_normalize_rows;
use osnet::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn spec_from_dict(d: Option<&Bound<'_, PyDict>>) -> PyResult<NetworkSpec> {
    let mut spec = NetworkSpec::default();
    if let Some(d) = d {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                v.extract::<bool>()?.to_string()
            } else if let Ok(list) = v.extract::<Vec<usize>>() {
                list.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            } else {
                v.str()?.to_string()
            };
            spec.set(&key, &value).map_err(py_err)?;
        }
    }
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// OSNet feature extractor with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    model: OSNetModel,
    store: ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Builds a randomly initialized model. `spec` maps manifest keys such
    /// as `streams`, `fusion` or `width_multiplier` to values.
    #[new]
    #[pyo3(signature = (spec = None, seed = 0))]
    fn new(spec: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let spec = spec_from_dict(spec)?;
        let (model, store) = build_model(&spec, seed).map_err(py_err)?;
        Ok(PyModel { model, store })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::<f32>::load(path).map_err(py_err)?;
        let model = ckpt.model().map_err(py_err)?;
        Ok(PyModel {
            model,
            store: ckpt.store,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            spec: self.model.spec.clone(),
            store: self.store.clone(),
            meta: BTreeMap::new(),
            extra: Vec::new(),
        };
        ckpt.save(path).map_err(py_err)
    }

    /// Manifest key/value pairs of the architecture.
    fn spec(&self) -> BTreeMap<String, String> {
        self.model
            .spec
            .to_manifest()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.model.spec.input_height, self.model.spec.input_width)
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.model.spec.feature_dim
    }

    /// `(name, (channels, height, width))` after every stage.
    fn shape_ladder(&self) -> PyResult<Vec<(String, (usize, usize, usize))>> {
        let (h, w) = self.input_size();
        let rows = self.model.shape_ladder(h, w).map_err(py_err)?;
        Ok(rows.into_iter().map(|(n, [c, h, w])| (n, (c, h, w))).collect())
    }

    /// Parameter and mult-add totals at the model's input size.
    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = count_params(&self.model, &self.store).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("params", r.params_total)?;
        d.set_item("multadds", r.multadds_total)?;
        d.set_item("gate_multadds", r.gate_multadds_total)?;
        d.set_item("other_ops", r.other_ops_total)?;
        d.set_item("head_params", r.head_params)?;
        Ok(d)
    }

    /// Eval-mode embeddings of images given as flat channel-major lists of
    /// 3·h·w values in [0, 1] at the model's input size.
    #[pyo3(signature = (images, normalize_rows = true))]
    fn embed(&mut self, images: Vec<Vec<f32>>, normalize_rows: bool) -> PyResult<Vec<Vec<f32>>> {
        let (h, w) = self.input_size();
        let n = images.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if let Some(i) = images.iter().position(|img| img.len() != 3 * h * w) {
            return Err(PyValueError::new_err(format!(
                "image {} has {} values, expected 3*{}*{}",
                i,
                images[i].len(),
                h,
                w
            )));
        }
        let x = Tensor::from_vec(&[n, 3, h, w], images.concat()).map_err(py_err)?;
        let x = normalize(&x, &IMAGENET_MEAN, &IMAGENET_STD).map_err(py_err)?;
        let mut f = self.model.embed(&mut self.store, &x).map_err(py_err)?;
        if normalize_rows {
            l2_normalize_rows(&mut f).map_err(py_err)?;
        }
        let d = f.len() / n;
        Ok(f.data().chunks(d).map(<[f32]>::to_vec).collect())
    }
}

/// CMC and mAP of a query × gallery distance matrix.
#[pyfunction]
#[pyo3(signature = (distmat, query_pids, query_camids, gallery_pids, gallery_camids, max_rank = 20))]
fn evaluate<'py>(
    py: Python<'py>,
    distmat: Vec<Vec<f64>>,
    query_pids: Vec<usize>,
    query_camids: Vec<usize>,
    gallery_pids: Vec<usize>,
    gallery_camids: Vec<usize>,
    max_rank: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let rows = distmat.len();
    let cols = distmat.first().map_or(0, Vec::len);
    if distmat.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("distmat rows have different lengths"));
    }
    let d = DistMat::new(rows, cols, distmat.concat()).map_err(py_err)?;
    let r = eval_distmat(
        &d,
        Labels {
            pids: &query_pids,
            camids: &query_camids,
        },
        Labels {
            pids: &gallery_pids,
            camids: &gallery_camids,
        },
        max_rank,
    )
    .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("cmc", r.cmc.clone())?;
    out.set_item("map", r.map)?;
    out.set_item("valid_queries", r.protocol.valid_queries)?;
    out.set_item("skipped_queries", r.protocol.skipped_queries)?;
    Ok(out)
}

/// Receptive field side of a stream with `depth` Lite 3×3 layers.
#[pyfunction]
fn receptive_field(depth: usize) -> PyResult<usize> {
    rf(depth).map_err(py_err)
}

/// `(beta, gamma, height, width, params, multadds)` over the default
/// width and resolution multipliers.
#[pyfunction]
fn cost_grid() -> PyResult<Vec<(f64, f64, usize, usize, u64, u64)>> {
    let rows = shrink_grid(&NetworkSpec::default(), &GRID_STEPS, &GRID_STEPS).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.beta, r.gamma, r.height, r.width, r.params, r.multadds))
        .collect())
}

/// Runs a command-line invocation such as `["summarize", "--grid"]` and
/// returns its output.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<String> {
    let argv = std::iter::once("osnet".to_string()).chain(args);
    osnet::cli::run_args(argv).map_err(py_err)
}

#[pymodule]
fn pyosnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(cost_grid, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
