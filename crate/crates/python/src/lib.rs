//! Python bindings: corpus generation, training runs, translation, BLEU and
//! the KL estimator grid.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pivot_distill::cli::{self, LoadedModel, TrainConfig};
use pivot_distill::corpus::GeneratorConfig;
use pivot_distill::evaluation::{self, MAX_ORDER};
use pivot_distill::objectives::TeachingMethod;
use pivot_distill::pivot_baseline::{decode_best, two_step_decode, PivotChain};
use pivot_distill::Error;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Numeric(_) | Error::Domain { .. } => PyArithmeticError::new_err(msg),
        Error::Config(_) | Error::Capacity { .. } | Error::Alignment { .. } | Error::Json(_) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for pivot_distill::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// A trained model with its vocabularies, opened from a run directory or a
/// `.pdst` checkpoint.
#[pyclass(name = "Model", module = "pivot_distill", frozen)]
struct PyModel {
    inner: LoadedModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: LoadedModel::open(&path).py_err()?,
        })
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.inner.path.clone()
    }

    /// `(source vocabulary, target vocabulary, embedding, hidden)` sizes.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.params.dims();
        (d.src_vocab, d.tgt_vocab, d.emb, d.hidden)
    }

    #[pyo3(signature = (sentence, beam = 5))]
    fn translate(&self, py: Python<'_>, sentence: &str, beam: usize) -> PyResult<String> {
        let x = self.inner.src_vocab.encode(sentence);
        let y = py.detach(|| decode_best(&self.inner.params, &x, beam)).py_err()?;
        Ok(self.inner.tgt_vocab.decode(&y))
    }

    #[pyo3(signature = (sentences, beam = 5))]
    fn translate_batch(&self, py: Python<'_>, sentences: Vec<String>, beam: usize) -> PyResult<Vec<String>> {
        py.detach(|| {
            sentences
                .iter()
                .map(|s| {
                    let y = decode_best(&self.inner.params, &self.inner.src_vocab.encode(s), beam)?;
                    Ok(self.inner.tgt_vocab.decode(&y))
                })
                .collect::<pivot_distill::Result<Vec<_>>>()
        })
        .py_err()
    }

    /// Log-probability of `target` given `source`, end of sentence included.
    fn log_prob(&self, source: &str, target: &str) -> PyResult<f64> {
        let pair = (self.inner.src_vocab.encode(source), self.inner.tgt_vocab.encode(target));
        Ok(-evaluation::validation_loss(&self.inner.params, &[pair]).py_err()?)
    }

    /// Mean argmax probability along the greedy translations of `sentences`.
    fn peakedness(&self, py: Python<'_>, sentences: Vec<String>) -> PyResult<f64> {
        let xs: Vec<_> = sentences.iter().map(|s| self.inner.src_vocab.encode(s)).collect();
        let p = py.detach(|| evaluation::peakedness(&self.inner.params, &xs)).py_err()?;
        Ok(p.mean_max_prob)
    }

    fn __repr__(&self) -> String {
        let (s, t, e, h) = self.dims();
        format!("Model({:?}, src={s}, tgt={t}, emb={e}, hidden={h})", self.inner.path)
    }
}

/// Translates through the pivot; returns `(pivot, target)`.
#[pyfunction]
#[pyo3(signature = (source_pivot, pivot_target, sentence, beam = 5))]
fn pivot_translate(
    py: Python<'_>,
    source_pivot: &PyModel,
    pivot_target: &PyModel,
    sentence: &str,
    beam: usize,
) -> PyResult<(String, String)> {
    let (first, second) = (&source_pivot.inner, &pivot_target.inner);
    if first.tgt_vocab != second.src_vocab {
        return Err(PyValueError::new_err("pivot vocabularies of the two models differ"));
    }
    let chain = PivotChain::new(first.params.clone(), second.params.clone(), beam).py_err()?;
    let x = first.src_vocab.encode(sentence);
    let out = py.detach(|| two_step_decode(&chain, &x)).py_err()?;
    Ok((first.tgt_vocab.decode(&out.pivot), second.tgt_vocab.decode(&out.target)))
}

/// Corpus BLEU in [0, 1].
#[pyfunction]
#[pyo3(signature = (hypotheses, references, lowercase = false))]
fn corpus_bleu(hypotheses: Vec<String>, references: Vec<String>, lowercase: bool) -> PyResult<f64> {
    Ok(evaluation::corpus_bleu(&hypotheses, &references, MAX_ORDER, lowercase)
        .py_err()?
        .bleu)
}

#[pyfunction]
fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    evaluation::sentence_bleu(hypothesis, reference)
}

#[pyfunction]
fn methods() -> Vec<&'static str> {
    TeachingMethod::NAMES.to_vec()
}

/// Writes a synthetic trilingual split; returns `{file name: sha256}`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = None, small = false))]
fn generate_corpus<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    seed: Option<u64>,
    small: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = if small {
        GeneratorConfig::small_source_pivot()
    } else {
        GeneratorConfig::default()
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let manifest = py.detach(|| cli::gen_corpus(&config, &out_dir)).py_err()?;
    let out = PyDict::new(py);
    for f in manifest.files {
        out.set_item(f.name, f.sha256)?;
    }
    Ok(out)
}

fn run_training<'py>(
    py: Python<'py>,
    config: TrainConfig,
    expected: Option<cli::Provenance>,
    resume: bool,
    log: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let summary = py
        .detach(|| cli::train_run(&config, expected.as_ref(), resume, log))
        .py_err()?;
    let out = PyDict::new(py);
    out.set_item("out_dir", summary.out_dir)?;
    out.set_item("final_model", summary.final_model)?;
    out.set_item("update", summary.update)?;
    out.set_item("finished", summary.finished)?;
    Ok(out)
}

/// Trains one run from a JSON config string.
#[pyfunction]
#[pyo3(signature = (config_json, resume = false, log = false))]
fn train<'py>(py: Python<'py>, config_json: &str, resume: bool, log: bool) -> PyResult<Bound<'py, PyDict>> {
    let config: TrainConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    run_training(py, config, None, resume, log)
}

/// Trains from a config file or reruns a run manifest, checking its input
/// hashes.
#[pyfunction]
#[pyo3(signature = (path, out_dir = None, resume = false, log = false))]
fn train_file<'py>(
    py: Python<'py>,
    path: PathBuf,
    out_dir: Option<PathBuf>,
    resume: bool,
    log: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let (mut config, provenance) = cli::read_train_config(&path).py_err()?;
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    run_training(py, config, provenance, resume, log)
}

/// KL estimator grid over checkpoints; returns `(columns, {row: values})`.
#[pyfunction]
#[pyo3(signature = (teacher, checkpoints, source, pivot, limit = None, teacher_column = false, beam = 5, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn verify_kl<'py>(
    py: Python<'py>,
    teacher: &PyModel,
    checkpoints: Vec<PathBuf>,
    source: PathBuf,
    pivot: PathBuf,
    limit: Option<usize>,
    teacher_column: bool,
    beam: usize,
    seed: u64,
) -> PyResult<(Vec<String>, Bound<'py, PyDict>)> {
    let table = py
        .detach(|| {
            cli::verify_kl(
                &teacher.inner,
                &checkpoints,
                &source,
                &pivot,
                limit,
                teacher_column,
                beam,
                seed,
            )
        })
        .py_err()?;
    let rows = PyDict::new(py);
    for r in table.rows {
        rows.set_item(r.label, r.values)?;
    }
    Ok((table.columns, rows))
}

/// Records of a metrics stream as dicts.
#[pyfunction]
fn read_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    cli::read_metrics(&path)
        .py_err()?
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("run", r.run)?;
            d.set_item("update", r.update)?;
            d.set_item("t", r.t)?;
            d.set_item("metric", r.metric)?;
            d.set_item("value", r.value)?;
            d.set_item("method", r.method)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "pivot_distill")]
fn pivot_distill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pivot_translate, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_file, m)?)?;
    m.add_function(wrap_pyfunction!(verify_kl, m)?)?;
    m.add_function(wrap_pyfunction!(read_metrics, m)?)?;
    Ok(())
}
