//! Python bindings: graph access, subgraph statistics, patient-context
//! parsing, evidence labelling, paired statistics and mock-backed runs.
//! Structured results come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use qkg_core::constraints::ConstraintStore;
use qkg_core::kg::{load_graph, EntityIndex, GraphFormat, GraphStore as CoreGraph, LoadOptions};
use qkg_core::llm::{Gateway, GatewayConfig, MockBackend, MockScript, ROLE_REASONER, ROLE_VALIDATOR};
use qkg_core::patient::{fallback_patient_context, ApplicabilityEngine, LabSynonyms, PatientContext, RuleOutcome};
use qkg_core::pipeline::{load_dataset, run_evaluation, EvalMode, PipelineConfig, PipelineEnv, RunOutput};
use qkg_core::prompts::PromptSet;
use qkg_core::stats;
use qkg_core::subgraph::build_subgraph;
use qkg_core::QkgError;
use serde::Serialize;

fn err(e: QkgError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into native Python objects.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Exact two-sided McNemar p-value for discordant counts `b` and `c`.
#[pyfunction]
fn mcnemar_exact(b: u64, c: u64) -> f64 {
    stats::mcnemar_exact(b, c)
}

/// Accuracy after removing leakage W->C gains and context-driven C->W losses.
#[pyfunction]
fn adjusted_accuracy(final_correct: u64, n: u64, leak_w2c: u64, ctx_c2w: u64) -> PyResult<f64> {
    stats::adjusted_accuracy(final_correct, n, leak_w2c, ctx_c2w).map_err(err)
}

#[pyfunction]
fn detect_signals(py: Python<'_>, evidence: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &stats::detect_signals(evidence))
}

/// Evidence label name, e.g. `EV_KG_GROUNDED`.
#[pyfunction]
fn label_evidence(evidence: &str) -> &'static str {
    match stats::label_evidence(evidence) {
        stats::EvidenceLabel::EvContext => "EV_CONTEXT",
        stats::EvidenceLabel::EvLeakage => "EV_LEAKAGE",
        stats::EvidenceLabel::EvKgGrounded => "EV_KG_GROUNDED",
        stats::EvidenceLabel::EvUnclassified => "EV_UNCLASSIFIED",
    }
}

#[pyfunction]
fn parse_qa_response(py: Python<'_>, raw: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &qkg_core::llm::parse_qa_response(raw).map_err(err)?)
}

/// Rule-based patient context from free text.
#[pyfunction]
fn patient_context(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &fallback_patient_context(text, &LabSynonyms::default()))
}

/// Checks a constraint condition (`eGFR < 30`) against a patient context
/// given as a JSON string. Returns `match`, `no_match` or `undecidable`.
#[pyfunction]
fn evaluate_condition(condition: &str, context_json: &str) -> PyResult<&'static str> {
    let ctx: PatientContext = serde_json::from_str(context_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(match ApplicabilityEngine::default().evaluate_rule(condition, &ctx) {
        RuleOutcome::Match => "match",
        RuleOutcome::NoMatch => "no_match",
        RuleOutcome::Undecidable => "undecidable",
    })
}

/// Runs the evaluation pipeline against a scripted mock model and returns
/// the run summary. `mode` is `none`, `kg` or `qkg`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (dataset, mock_script, out_dir, mode = "qkg", graph = None, constraints = None, workers = 1))]
fn run_mock_evaluation(
    py: Python<'_>,
    dataset: PathBuf,
    mock_script: PathBuf,
    out_dir: PathBuf,
    mode: &str,
    graph: Option<PathBuf>,
    constraints: Option<PathBuf>,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let mode: EvalMode = mode.parse().map_err(err)?;
    let samples = load_dataset(&dataset).map_err(err)?;
    let graph = match graph {
        Some(p) => Some(load_graph(&p, format_of(&p)?, &LoadOptions::default()).map_err(err)?.0),
        None => None,
    };
    let constraints = constraints
        .map(|p| ConstraintStore::load(&p))
        .transpose()
        .map_err(err)?;
    let backend = MockBackend::new(MockScript::from_json_file(&mock_script).map_err(err)?);
    let gateway = Gateway::new(
        GatewayConfig::mock_roles(&[ROLE_REASONER, ROLE_VALIDATOR]),
        Arc::new(backend),
    );
    let prompts = PromptSet::default();
    let engine = ApplicabilityEngine::default();
    let config = PipelineConfig {
        mode,
        workers,
        ..Default::default()
    };
    let env = PipelineEnv {
        gateway: &gateway,
        prompts: &prompts,
        graph: graph.as_ref(),
        constraints: constraints.as_ref(),
        engine: &engine,
        config: &config,
    };
    let summary = py
        .detach(|| run_evaluation(&samples, &env, &RunOutput::new(&out_dir)))
        .map_err(err)?;
    to_py(py, &summary)
}

fn format_of(path: &std::path::Path) -> PyResult<GraphFormat> {
    GraphFormat::from_path(path)
        .ok_or_else(|| PyValueError::new_err(format!("cannot tell the format of {}", path.display())))
}

/// In-memory knowledge graph.
#[pyclass(name = "GraphStore", frozen)]
struct PyGraph {
    inner: CoreGraph,
}

#[pymethods]
impl PyGraph {
    /// Loads a CSV (PrimeKG layout) or JSONL graph, chosen by extension.
    #[staticmethod]
    #[pyo3(signature = (path, collapse_reverse = false))]
    fn load(py: Python<'_>, path: PathBuf, collapse_reverse: bool) -> PyResult<Self> {
        let format = format_of(&path)?;
        let options = LoadOptions {
            collapse_reverse,
            ..Default::default()
        };
        let (inner, _) = py.detach(|| load_graph(&path, format, &options)).map_err(err)?;
        Ok(PyGraph { inner })
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.num_entities()
    }

    #[getter]
    fn num_triplets(&self) -> usize {
        self.inner.num_triplets()
    }

    fn entity(&self, py: Python<'_>, index: EntityIndex) -> PyResult<Py<PyAny>> {
        let e = self
            .inner
            .entity(index)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        to_py(py, e)
    }

    /// Entities whose normalized name matches `query`, best first.
    #[pyo3(signature = (query, limit = 10))]
    fn search(&self, py: Python<'_>, query: &str, limit: usize) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.search_entities(query, limit).map_err(err)?)
    }

    /// Incident triplets as `(head, relation, tail)` tuples.
    fn neighbors(&self, index: EntityIndex) -> PyResult<Vec<(EntityIndex, String, EntityIndex)>> {
        let ts = self
            .inner
            .neighbors(index)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        Ok(ts
            .into_iter()
            .map(|t| (t.head, t.relation.to_string(), t.tail))
            .collect())
    }

    /// Layer sizes of the two-layer subgraph around `target`.
    fn subgraph_stats(&self, py: Python<'_>, target: EntityIndex) -> PyResult<Py<PyAny>> {
        let sub = py.detach(|| build_subgraph(&self.inner, target)).map_err(err)?;
        to_py(py, &sub.stats())
    }

    fn save_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_jsonl(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.num_triplets()
    }

    fn __repr__(&self) -> String {
        format!(
            "GraphStore(entities={}, triplets={})",
            self.inner.num_entities(),
            self.inner.num_triplets()
        )
    }
}

#[pymodule]
fn qkg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(mcnemar_exact, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(detect_signals, m)?)?;
    m.add_function(wrap_pyfunction!(label_evidence, m)?)?;
    m.add_function(wrap_pyfunction!(parse_qa_response, m)?)?;
    m.add_function(wrap_pyfunction!(patient_context, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_condition, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock_evaluation, m)?)?;
    Ok(())
}
