use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use prefixmerge as core;
use core::model::{DecodeOptions, ModelConfig, Transformer};
use core::pipeline::ExperimentConfig;
use core::prefix::{PrefixDesign, PrefixMatrix};
use core::tasks::TaskKind;

fn py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("{}: {}", e.kind(), e)),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Model", unsendable)]
pub struct PyModel {
    inner: Transformer,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, n_layers=2, n_heads=4, d_model=64, d_ff=128, vocab_size=200, max_src_len=40, max_tgt_len=16))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        max_src_len: usize,
        max_tgt_len: usize,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size,
            max_src_len,
            max_tgt_len,
        };
        Ok(Self {
            inner: Transformer::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Transformer::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn prefix_dim(&self) -> usize {
        self.inner.config().prefix_dim()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Greedy decode; `rows` selects prefix rows when a prefix is given.
    #[pyo3(signature = (src, prefix=None, rows=None, max_len=8, min_len=1))]
    fn decode(
        &self,
        src: Vec<usize>,
        prefix: Option<&PyPrefix>,
        rows: Option<Vec<usize>>,
        max_len: usize,
        min_len: usize,
    ) -> PyResult<Vec<usize>> {
        let opts = DecodeOptions::new(max_len, min_len);
        match prefix {
            Some(p) => {
                let rows = rows.unwrap_or_else(|| p.inner.merge_for_target());
                let view = p.inner.view(&rows);
                self.inner.greedy_decode(&src, Some(&view), opts)
            }
            None => self.inner.greedy_decode(&src, None, opts),
        }
        .map_err(py_err)
    }
}

#[pyclass(name = "PrefixMatrix", unsendable)]
pub struct PyPrefix {
    inner: PrefixMatrix,
}

#[pymethods]
impl PyPrefix {
    /// Manual shared/unique design.
    #[staticmethod]
    #[pyo3(signature = (model, shared, unique_per_task, n_tasks, seed=0))]
    fn manual(model: &PyModel, shared: usize, unique_per_task: usize, n_tasks: usize, seed: u64) -> PyResult<Self> {
        let d = PrefixDesign::manual(shared, unique_per_task, n_tasks).map_err(py_err)?;
        Ok(Self {
            inner: PrefixMatrix::new(d, model.inner.config(), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (model, init_len, top_n, n_tasks, seed=0))]
    fn self_adaptive(model: &PyModel, init_len: usize, top_n: usize, n_tasks: usize, seed: u64) -> PyResult<Self> {
        let d = PrefixDesign::self_adaptive(init_len, top_n, n_tasks).map_err(py_err)?;
        Ok(Self {
            inner: PrefixMatrix::new(d, model.inner.config(), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PrefixMatrix::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn row_dim(&self) -> usize {
        self.inner.row_dim()
    }

    fn task_map(&self, task: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.task_map(task).map_err(py_err)?.to_vec())
    }

    fn merge_for_target(&self) -> Vec<usize> {
        self.inner.merge_for_target()
    }

    fn region_of(&self, row: usize) -> String {
        self.inner.region_of(row).to_string()
    }

    /// `(shared, unique, partial, inactive)` row counts.
    fn split_counts(&self) -> (usize, usize, usize, usize) {
        self.inner.split_counts()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

/// ROUGE-1/2/L of two whitespace-tokenized strings as a JSON-shaped dict.
#[pyfunction]
fn rouge(py: Python<'_>, candidate: &str, reference: &str) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(&core::eval::rouge(candidate, reference)).map_err(json_err)?;
    from_json(py, &s)
}

#[pyfunction]
#[pyo3(signature = (train, test, max_word_diff=2))]
fn leakage_check(py: Python<'_>, train: Vec<String>, test: Vec<String>, max_word_diff: usize) -> PyResult<Py<PyAny>> {
    let r = core::tasks::leakage_check(&train, &test, max_word_diff).map_err(py_err)?;
    from_json(py, &serde_json::to_string(&r).map_err(json_err)?)
}

/// `n` synthetic examples of `kind` (sum, qa, qfs, copy, denoise) as dicts.
#[pyfunction]
#[pyo3(signature = (kind, n, seed=0))]
fn generate(py: Python<'_>, kind: &str, n: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let kind: TaskKind = kind.parse().map_err(py_err)?;
    let ex = core::tasks::generate(kind, &Default::default(), seed, n).map_err(py_err)?;
    from_json(py, &serde_json::to_string(&ex).map_err(json_err)?)
}

/// Full run from TOML text: backbone, stage 1, stage-2 comparison.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_toml: &str, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let r = core::pipeline::run_pipeline(&cfg, &out_dir).map_err(py_err)?;
    from_json(py, &serde_json::to_string(&r).map_err(json_err)?)
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

fn from_json(py: Python<'_>, s: &str) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (s,))?.unbind())
}

#[pymodule]
#[pyo3(name = "prefixmerge")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrefix>()?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(leakage_check, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
