//! Python bindings: synthetic data, training runs, metrics and analysis primitives.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use clvqa::analysis::AnswerDistribution;
use clvqa::embedding::EmbeddingTable;
use clvqa::metrics::MetricsReport;
use clvqa::runner::{RunConfig, RunOutput};
use clvqa::strategies::{Anchor, EwcState};
use clvqa::synth::SynthConfig;
use clvqa::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Range { .. } | Error::Shape { .. } | Error::Undefined(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// An ordered sequence of tasks with its answer vocabulary.
#[pyclass(module = "clvqa_py", frozen)]
pub struct TaskSequence {
    inner: clvqa::data::TaskSequence,
}

#[pymethods]
impl TaskSequence {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.tasks().iter().map(|t| t.name.clone()).collect()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Writes JSONL splits plus a manifest into `dir`; returns the manifest path.
    fn write(&self, dir: PathBuf) -> PyResult<PathBuf> {
        clvqa::synth::write_sequence(&dir, &self.inner).map_err(py_err)
    }

    /// Answer-distribution skew divergence for every ordered pair; `None` on the diagonal.
    #[pyo3(signature = (alpha = clvqa::analysis::SKEW_ALPHA))]
    fn answer_divergence(&self, alpha: f64) -> PyResult<Vec<Vec<Option<f64>>>> {
        clvqa::analysis::answer_divergence_matrix(&self.inner, alpha).map_err(py_err)
    }
}

/// Generates a synthetic task sequence. Unset arguments keep their defaults.
#[pyfunction]
#[pyo3(signature = (tasks=None, samples_per_task=None, eval_per_task=None, classes_per_task=None,
    feature_dim=None, answer_overlap=None, input_shift=None, class_separation=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn synth(
    tasks: Option<usize>,
    samples_per_task: Option<usize>,
    eval_per_task: Option<usize>,
    classes_per_task: Option<usize>,
    feature_dim: Option<usize>,
    answer_overlap: Option<f64>,
    input_shift: Option<f64>,
    class_separation: Option<f64>,
    seed: Option<u64>,
) -> PyResult<TaskSequence> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        tasks: tasks.unwrap_or(d.tasks),
        samples_per_task: samples_per_task.unwrap_or(d.samples_per_task),
        eval_per_task: eval_per_task.unwrap_or(d.eval_per_task),
        classes_per_task: classes_per_task.unwrap_or(d.classes_per_task),
        feature_dim: feature_dim.unwrap_or(d.feature_dim),
        answer_overlap: answer_overlap.unwrap_or(d.answer_overlap),
        input_shift: input_shift.unwrap_or(d.input_shift),
        class_separation: class_separation.unwrap_or(d.class_separation),
        seed: seed.unwrap_or(d.seed),
        ..d
    };
    let inner = clvqa::synth::synth_sequence(&cfg).map_err(py_err)?;
    Ok(TaskSequence { inner })
}

#[pyfunction]
fn load_sequence(manifest: PathBuf) -> PyResult<TaskSequence> {
    let inner = clvqa::data::load_sequence(&manifest).map_err(py_err)?;
    Ok(TaskSequence { inner })
}

/// Default run configuration as JSON; edit and pass back to [`run`].
#[pyfunction]
fn default_run_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Outcome of one training run.
#[pyclass(module = "clvqa_py", frozen)]
pub struct RunResult {
    output: RunOutput,
    metrics: MetricsReport,
}

#[pymethods]
impl RunResult {
    /// `matrix[t][i]`: accuracy on task `i` after training task `t`.
    #[getter]
    fn matrix(&self) -> Vec<Vec<Option<f64>>> {
        self.output.matrix.values.clone()
    }

    #[getter]
    fn order(&self) -> Vec<usize> {
        self.output.order.clone()
    }

    #[getter]
    fn final_accuracy(&self) -> f64 {
        self.metrics.final_accuracy
    }

    #[getter]
    fn learned_accuracy(&self) -> f64 {
        self.metrics.learned_accuracy
    }

    #[getter]
    fn bwt(&self) -> Option<f64> {
        self.metrics.bwt
    }

    #[getter]
    fn sbwt(&self) -> Option<f64> {
        self.metrics.sbwt.as_ref().map(|s| s.value)
    }

    fn accuracy_csv(&self) -> String {
        self.output.matrix.to_csv().as_str().to_string()
    }

    fn predictions_jsonl(&self) -> PyResult<String> {
        let bytes = self.output.log.to_jsonl().map_err(py_err)?;
        String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Trains over `seq`. `config` is JSON in the shape of [`default_run_config`];
/// `embeddings` maps tokens to vectors and enables SBWT.
#[pyfunction]
#[pyo3(signature = (seq, config=None, embeddings=None))]
fn run(
    py: Python<'_>,
    seq: &TaskSequence,
    config: Option<&str>,
    embeddings: Option<BTreeMap<String, Vec<f64>>>,
) -> PyResult<RunResult> {
    let cfg: RunConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    let table = embeddings.map(EmbeddingTable::from_entries).transpose().map_err(py_err)?;
    let seq = &seq.inner;
    py.detach(|| {
        let output = clvqa::runner::run_sequence(seq, &cfg)?;
        let metrics = MetricsReport::compute(&output.matrix, Some(&output.log), table.as_ref())?;
        Ok(RunResult { output, metrics })
    })
    .map_err(py_err)
}

/// Per-sample semantic backward-transfer term.
#[pyfunction]
fn sbwt_term(
    ref_answer: &str,
    later_answer: &str,
    acc_ref: f64,
    acc_later: f64,
    embeddings: BTreeMap<String, Vec<f64>>,
) -> PyResult<f64> {
    let table = EmbeddingTable::from_entries(embeddings).map_err(py_err)?;
    Ok(clvqa::metrics::sbwt_term(ref_answer, later_answer, acc_ref, acc_later, &table).value)
}

/// Skew divergence between two answer-count tables.
#[pyfunction]
#[pyo3(signature = (p, q, alpha = clvqa::analysis::SKEW_ALPHA))]
fn skew_divergence(p: BTreeMap<String, usize>, q: BTreeMap<String, usize>, alpha: f64) -> PyResult<f64> {
    let p = AnswerDistribution::from_counts(&p).map_err(py_err)?;
    let q = AnswerDistribution::from_counts(&q).map_err(py_err)?;
    clvqa::analysis::skew_divergence(&p, &q, alpha).map_err(py_err)
}

#[pyfunction]
fn linear_cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let (x, y) = (rows_to_array(&x)?, rows_to_array(&y)?);
    clvqa::analysis::linear_cka(x.view(), y.view()).map_err(py_err)
}

/// Spearman's rho and its two-sided p-value.
#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = clvqa::analysis::spearman(&xs, &ys).map_err(py_err)?;
    Ok((s.rho, s.p))
}

#[pyfunction]
fn agem_project(g: Vec<f64>, reference: Vec<f64>) -> PyResult<Vec<f64>> {
    clvqa::strategies::agem_project(&g.into(), &reference.into())
        .map(|v| v.0)
        .map_err(py_err)
}

/// EWC penalty and gradient for `(params, fisher)` anchors.
#[pyfunction]
fn ewc_penalty(theta: Vec<f64>, anchors: Vec<(Vec<f64>, Vec<f64>)>, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    let state = EwcState {
        lambda: lam,
        anchors: anchors
            .into_iter()
            .map(|(p, f)| Anchor { params: p.into(), fisher: f })
            .collect(),
    };
    clvqa::strategies::ewc_penalty(&theta, &state)
        .map(|(l, g)| (l, g.0))
        .map_err(py_err)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    clvqa::cli::main_with(std::iter::once("clvqa".to_string()).chain(args))
}

#[pymodule]
pub fn clvqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TaskSequence>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(default_run_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sbwt_term, m)?)?;
    m.add_function(wrap_pyfunction!(skew_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(agem_project, m)?)?;
    m.add_function(wrap_pyfunction!(ewc_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
