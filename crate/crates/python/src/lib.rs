//! Python bindings for `patsim`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use patsim::engine::{self, RunConfig, SimilarityMatrix, VMethod};
use patsim::matsim::{self, MatSimMethod, SimScore};
use patsim::vectorizer::{self, LsaModel, PatientMatrix, VectorizerConfig};
use patsim::{corpus, eval, segmenter, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "PatientMatrix", module = "patsim_py", frozen)]
struct PyPatientMatrix {
    inner: PatientMatrix,
}

#[pymethods]
impl PyPatientMatrix {
    /// Rows are L2-normalized on construction.
    #[new]
    #[pyo3(signature = (patient_id, rows, note_indices = None))]
    fn new(patient_id: String, rows: Vec<Vec<f64>>, note_indices: Option<Vec<usize>>) -> PyResult<Self> {
        let indices = note_indices.unwrap_or_else(|| (0..rows.len()).collect());
        PatientMatrix::from_rows(patient_id, rows, indices)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn patient_id(&self) -> &str {
        &self.inner.patient_id
    }

    #[getter]
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn note_indices(&self) -> Vec<usize> {
        self.inner.note_indices.clone()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("PatientMatrix({:?}, {}x{})", self.inner.patient_id, self.inner.nrows(), self.inner.dim())
    }
}

#[pyclass(name = "LsaModel", module = "patsim_py", frozen)]
struct PyLsaModel {
    inner: LsaModel,
}

#[pymethods]
impl PyLsaModel {
    #[staticmethod]
    #[pyo3(signature = (docs, dim = 50, seed = 0, min_doc_freq = 1, sublinear_tf = true))]
    fn fit(py: Python<'_>, docs: Vec<String>, dim: usize, seed: u64, min_doc_freq: usize, sublinear_tf: bool) -> PyResult<Self> {
        let cfg = VectorizerConfig { dim, seed, min_doc_freq, sublinear_tf, ..VectorizerConfig::default() };
        py.detach(|| vectorizer::fit_lsa(&docs, &cfg))
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        LsaModel::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Unit-length embedding, or None when no token is in the vocabulary.
    fn embed(&self, text: &str) -> Option<Vec<f64>> {
        self.inner.embed(text)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values.clone()
    }
}

#[pyclass(name = "SimilarityMatrix", module = "patsim_py", frozen)]
struct PySimilarityMatrix {
    inner: SimilarityMatrix,
}

#[pymethods]
impl PySimilarityMatrix {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        SimilarityMatrix::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn write_csv(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(py_err)
    }

    #[getter]
    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids.clone()
    }

    #[getter]
    fn wall_time_seconds(&self) -> f64 {
        self.inner.wall_time_seconds
    }

    #[getter]
    fn mmethod(&self) -> &'static str {
        self.inner.config.mmethod.as_str()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<Option<f64>> {
        let n = self.inner.len();
        if i >= n || j >= n {
            return Err(PyValueError::new_err(format!("index out of range for {n} patients")));
        }
        Ok(self.inner.get(i, j).get())
    }

    fn get_by_id(&self, a: &str, b: &str) -> PyResult<Option<f64>> {
        self.inner
            .get_by_id(a, b)
            .map(SimScore::get)
            .ok_or_else(|| PyValueError::new_err(format!("unknown patient {a:?} or {b:?}")))
    }

    /// Dense n×n list with None for undefined scores.
    fn to_list(&self) -> Vec<Vec<Option<f64>>> {
        let n = self.inner.len();
        (0..n).map(|i| (0..n).map(|j| self.inner.get(i, j).get()).collect()).collect()
    }
}

type EdsTuple = (f64, Vec<(usize, usize)>, Vec<f64>);
type SynthNotes = (Vec<(String, String, String)>, BTreeMap<String, usize>);

fn parse_method(s: &str) -> PyResult<MatSimMethod> {
    s.parse().map_err(py_err)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    vectorizer::tokenize(text)
}

/// `(title, body)` pairs; untitled paragraphs get the title "untitled".
#[pyfunction]
fn segment_note(text: &str) -> Vec<(String, String)> {
    segmenter::segment_note(text).into_iter().map(|s| (s.title, s.body)).collect()
}

#[pyfunction]
fn rv2(a: PyRef<'_, PyPatientMatrix>, b: PyRef<'_, PyPatientMatrix>) -> PyResult<Option<f64>> {
    matsim::rv2(&a.inner, &b.inner).map(SimScore::get).map_err(py_err)
}

#[pyfunction]
fn mms(a: PyRef<'_, PyPatientMatrix>, b: PyRef<'_, PyPatientMatrix>) -> PyResult<Option<f64>> {
    matsim::mms(&a.inner, &b.inner).map(SimScore::get).map_err(py_err)
}

/// Score, best path, and the λ trace.
#[pyfunction]
fn eds(a: PyRef<'_, PyPatientMatrix>, b: PyRef<'_, PyPatientMatrix>) -> PyResult<EdsTuple> {
    let c = matsim::cross_sim(&a.inner, &b.inner).map_err(py_err)?;
    let r = matsim::eds_cross(&c);
    Ok((r.score.value, r.path, r.lambdas))
}

#[pyfunction]
#[pyo3(signature = (method, a, b))]
fn similarity(method: &str, a: PyRef<'_, PyPatientMatrix>, b: PyRef<'_, PyPatientMatrix>) -> PyResult<Option<f64>> {
    matsim::similarity(parse_method(method)?, &a.inner, &b.inner)
        .map(SimScore::get)
        .map_err(py_err)
}

/// Mean of the defined scores; None entries are undefined.
#[pyfunction]
fn combined(scores: Vec<Option<f64>>) -> PyResult<Option<f64>> {
    let scores: Vec<SimScore> = scores.into_iter().map(|s| s.map_or(SimScore::undefined(), SimScore::new)).collect();
    matsim::combined(&scores).map(SimScore::get).map_err(py_err)
}

#[pyfunction]
fn kendall_tau_b(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    eval::kendall_tau_b(&x, &y).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (matrices, mmethod = "rv2", workers = 1, seed = 0))]
fn compute_all_pairs(
    py: Python<'_>,
    matrices: Vec<PyRef<'_, PyPatientMatrix>>,
    mmethod: &str,
    workers: usize,
    seed: u64,
) -> PyResult<PySimilarityMatrix> {
    let mut map = BTreeMap::new();
    for m in &matrices {
        if map.insert(m.inner.patient_id.clone(), m.inner.clone()).is_some() {
            return Err(PyValueError::new_err(format!("duplicate patient {:?}", m.inner.patient_id)));
        }
    }
    let dim = map.values().next().map_or(50, PatientMatrix::dim);
    let vmethod = VMethod::new(engine::VectorFamily::Lsa, dim);
    let config = RunConfig { workers: workers.max(1), seed, ..RunConfig::new(vmethod, parse_method(mmethod)?) };
    py.detach(|| engine::compute_all_pairs(&map, &config))
        .map(|inner| PySimilarityMatrix { inner })
        .map_err(py_err)
}

/// Synthetic corpus with planted clusters: `(notes, assignment)` where notes
/// are `(patient_id, timestamp, text)` tuples. Written as JSONL when `out` is given.
#[pyfunction]
#[pyo3(signature = (n_patients, n_clusters, seed = 0, out = None))]
fn generate_synthetic(
    n_patients: usize,
    n_clusters: usize,
    seed: u64,
    out: Option<std::path::PathBuf>,
) -> PyResult<SynthNotes> {
    let (c, assignment) = corpus::generate_synthetic(&corpus::SynthSpec::new(n_patients, n_clusters, seed)).map_err(py_err)?;
    if let Some(p) = out {
        corpus::write_corpus(&c, p).map_err(py_err)?;
    }
    let notes = c
        .patients()
        .flat_map(|p| p.notes.iter())
        .map(|n| (n.patient_id.clone(), corpus::format_timestamp(&n.timestamp), n.text.clone()))
        .collect();
    Ok((notes, assignment))
}

#[pymodule]
fn patsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPatientMatrix>()?;
    m.add_class::<PyLsaModel>()?;
    m.add_class::<PySimilarityMatrix>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(segment_note, m)?)?;
    m.add_function(wrap_pyfunction!(rv2, m)?)?;
    m.add_function(wrap_pyfunction!(mms, m)?)?;
    m.add_function(wrap_pyfunction!(eds, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(combined, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_b, m)?)?;
    m.add_function(wrap_pyfunction!(compute_all_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
