//! Python bindings: bag I/O, checkpoint inference, attention normalisation,
//! metrics and nucleus morphometry.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lymphomil_core::datamodel::{
    read_embedding_file, read_label_mask, write_embedding_file, PatchRef, SlideBag as CoreBag,
};
use lymphomil_core::milnet::{forward_matrix, read_checkpoint, MilModel, Mode};
use lymphomil_core::raster::read_ppm;

fn py_err(e: lymphomil_core::Error) -> PyErr {
    match e {
        lymphomil_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_array<T: Copy + Default>(rows: &[Vec<T>]) -> PyResult<Array2<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array_to_rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// A slide's patch coordinates and embedding matrix.
#[pyclass(name = "SlideBag", module = "lymphomil")]
struct PyBag(CoreBag);

#[pymethods]
impl PyBag {
    #[new]
    #[pyo3(signature = (slide_id, coords, embeddings, patch_size = 256))]
    fn new(slide_id: String, coords: Vec<(u32, u32)>, embeddings: Vec<Vec<f32>>, patch_size: u32) -> PyResult<Self> {
        let patches = coords
            .into_iter()
            .map(|(x, y)| PatchRef { x, y, size: patch_size })
            .collect();
        let emb = rows_to_array(&embeddings)?;
        CoreBag::new(slide_id, None, patches, emb).map(PyBag).map_err(py_err)
    }

    #[getter]
    fn slide_id(&self) -> String {
        self.0.slide_id.clone()
    }

    #[getter]
    fn coords(&self) -> Vec<(u32, u32)> {
        self.0.patches.iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn embeddings(&self) -> Vec<Vec<f32>> {
        array_to_rows(&self.0.embeddings)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("SlideBag({:?}, n={}, dim={})", self.0.slide_id, self.0.len(), self.0.dim())
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_embedding_file(&self.0, &path).map_err(py_err)
    }
}

#[pyfunction]
fn read_bag(path: PathBuf) -> PyResult<PyBag> {
    read_embedding_file(&path).map(PyBag).map_err(py_err)
}

/// A trained checkpoint.
#[pyclass(name = "Model", module = "lymphomil")]
struct PyModel(MilModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_checkpoint(&path).map(PyModel).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.config.input_dim
    }

    /// Eval-mode forward pass. Returns a dict with `probs`, `logits`,
    /// `attention`, `raw_scores` and `predicted`.
    fn predict<'py>(&self, py: Python<'py>, embeddings: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let e = rows_to_array(&embeddings)?;
        let trace = forward_matrix(e.view(), &self.0, Mode::Eval).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("probs", trace.probs.to_vec())?;
        out.set_item("logits", trace.logits.to_vec())?;
        out.set_item("attention", array_to_rows(&trace.attention))?;
        out.set_item("raw_scores", array_to_rows(&trace.raw_scores))?;
        out.set_item("predicted", trace.predicted().as_str())?;
        Ok(out)
    }

    fn predict_bag<'py>(&self, py: Python<'py>, bag: &PyBag) -> PyResult<Bound<'py, PyDict>> {
        let e = lymphomil_core::milnet::embeddings_f64(&bag.0);
        self.predict(py, array_to_rows(&e))
    }
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    lymphomil_core::metrics::roc_auc(&scores, &labels).map_err(py_err)
}

/// Returns `(t, df, p)`.
#[pyfunction]
fn welch_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = lymphomil_core::morpho::welch_t_test(&a, &b).map_err(py_err)?;
    Ok((r.t, r.df, r.p))
}

/// Min-max normalises one branch column of an `N x 2` score matrix.
#[pyfunction]
fn normalize_attention(raw_scores: Vec<Vec<f64>>, branch: usize) -> PyResult<Vec<f64>> {
    let raw = rows_to_array(&raw_scores)?;
    lymphomil_core::viz::normalize_attention(raw.view(), branch).map_err(py_err)
}

/// Per-nucleus features for a label mask (PGM) and its patch image (PPM).
#[pyfunction]
#[pyo3(signature = (mask_path, image_path, slide_id = "slide"))]
fn nucleus_features<'py>(
    py: Python<'py>,
    mask_path: PathBuf,
    image_path: PathBuf,
    slide_id: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mask = read_label_mask(&mask_path).map_err(py_err)?;
    let rgb = read_ppm(&image_path).map_err(py_err)?;
    let records = lymphomil_core::morpho::nucleus_features(&mask, &rgb, slide_id, PatchRef::new(0, 0))
        .map_err(py_err)?;
    records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("nucleus_id", r.nucleus_id)?;
            d.set_item("area", r.area)?;
            d.set_item("perimeter", r.perimeter)?;
            d.set_item("circularity", r.circularity)?;
            d.set_item("aspect_ratio", r.aspect_ratio)?;
            d.set_item("solidity", r.solidity)?;
            d.set_item("rb_ratio", r.rb_ratio)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn lymphomil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyBag>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_bag, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_attention, m)?)?;
    m.add_function(wrap_pyfunction!(nucleus_features, m)?)?;
    Ok(())
}
