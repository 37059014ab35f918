//! Python bindings: load dumps and SAEs, encode embeddings and attribute
//! head outputs to components. Vectors and matrices cross the boundary as
//! plain lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clat_core::attribution::{attribute as core_attribute, Method, MethodOptions};
use clat_core::dump::{Tensor, TensorDump};
use clat_core::error::Error;
use clat_core::evalsuite;
use clat_core::head::HeadParams;
use clat_core::sae::{ActivationVector, SaeModel};
use clat_core::store::Manifest;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn matrix(rows: Vec<Vec<f64>>, name: &str) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("`{name}` rows have unequal lengths")));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `{name: (dims, flat f32 data)}` for every tensor in a dump file.
#[pyfunction]
fn read_dump(path: PathBuf) -> PyResult<RawTensors> {
    let dump = TensorDump::read(&path).map_err(err)?;
    let mut out = BTreeMap::new();
    for name in dump.names() {
        let t = dump.get(name).map_err(err)?;
        out.insert(name.to_string(), (t.dims().to_vec(), t.data().to_vec()));
    }
    Ok(out)
}

#[pyfunction]
fn write_dump(path: PathBuf, tensors: RawTensors) -> PyResult<()> {
    let mut dump = TensorDump::new();
    for (name, (dims, data)) in tensors {
        dump.insert(name, Tensor::new(dims, data).map_err(err)?).map_err(err)?;
    }
    dump.write(&path).map_err(err)
}

#[pyclass(name = "Sae", frozen)]
struct PySae {
    inner: SaeModel,
}

#[pymethods]
impl PySae {
    #[new]
    fn new(w_enc: Vec<Vec<f64>>, b_enc: Vec<f64>, decoder: Vec<Vec<f64>>, b_dec: Vec<f64>, k: usize) -> PyResult<Self> {
        let inner = SaeModel::new(
            matrix(w_enc, "w_enc")?,
            Array1::from(b_enc),
            matrix(decoder, "decoder")?,
            Array1::from(b_dec),
            k,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Loads an SAE written by `clat train-sae`; the manifest is the
    /// `.json` file next to the dump.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let dump = TensorDump::read(&path).map_err(err)?;
        let manifest = Manifest::read(path.with_extension("json")).map_err(err)?;
        Ok(Self { inner: SaeModel::from_dump(&dump, &manifest).map_err(err)? })
    }

    #[getter]
    fn d_pre(&self) -> usize {
        self.inner.d_pre()
    }

    #[getter]
    fn d_sae(&self) -> usize {
        self.inner.d_sae()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    /// Active `(component, activation)` pairs in component order.
    fn encode(&self, x: Vec<f64>) -> PyResult<Vec<(usize, f64)>> {
        let a = self.inner.encode(Array1::from(x).view()).map_err(err)?;
        Ok(a.iter().collect())
    }

    fn decode(&self, active: Vec<(usize, f64)>) -> PyResult<Vec<f64>> {
        let mut sorted = active;
        sorted.sort_by_key(|p| p.0);
        let a = ActivationVector {
            indices: sorted.iter().map(|p| p.0).collect(),
            values: sorted.iter().map(|p| p.1).collect(),
            d_sae: self.inner.d_sae(),
        };
        Ok(self.inner.decode(&a).map_err(err)?.to_vec())
    }

    fn atom(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.inner.d_sae() {
            return Err(err(Error::IndexOutOfRange { index: j, width: self.inner.d_sae() }));
        }
        Ok(self.inner.atom(j).to_vec())
    }
}

#[pyclass(name = "Head", frozen)]
struct PyHead {
    inner: HeadParams,
}

#[pymethods]
impl PyHead {
    #[new]
    fn new(gamma: Vec<f64>, beta: Vec<f64>, w_proj: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = HeadParams::new(Array1::from(gamma), Array1::from(beta), matrix(w_proj, "w_proj")?).map_err(err)?;
        Ok(Self { inner })
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.project(Array1::from(x).view()).map_err(err)?.values.to_vec())
    }

    /// Cosine between the projected embedding and `t`.
    fn output(&self, x: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
        self.inner.output(Array1::from(x).view(), Array1::from(t).view()).map_err(err)
    }
}

/// Scores every active component of `x` for prompt embedding `t`.
#[pyfunction]
#[pyo3(signature = (sae, head, x, t, method = "act_x_grad_exact", ig_steps = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn attribute<'py>(
    py: Python<'py>,
    sae: &PySae,
    head: &PyHead,
    x: Vec<f64>,
    t: Vec<f64>,
    method: &str,
    ig_steps: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = method.parse().map_err(err)?;
    let mut opts = MethodOptions { seed, ..Default::default() };
    if let Some(s) = ig_steps {
        opts.ig_steps = s;
    }
    let dec = sae.inner.decompose(Array1::from(x).view()).map_err(err)?;
    let rec = core_attribute(&sae.inner, &head.inner, &dec, Array1::from(t).view(), method, opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("method", rec.method.as_str())?;
    d.set_item("scores", rec.scores.clone())?;
    d.set_item("pseudo_bias", rec.pseudo_bias_score)?;
    d.set_item("pseudo_error", rec.pseudo_error_score)?;
    d.set_item("y", rec.output_y)?;
    d.set_item("total", rec.total())?;
    Ok(d)
}

#[pyfunction]
fn auroc(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<f64> {
    evalsuite::auroc(&positives, &negatives).map_err(err)
}

#[pymodule]
fn clat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySae>()?;
    m.add_class::<PyHead>()?;
    m.add_function(wrap_pyfunction!(read_dump, m)?)?;
    m.add_function(wrap_pyfunction!(write_dump, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    Ok(())
}
