use std::path::PathBuf;

use petra::checkpoint;
use petra::corpus::{generate_synthetic as generate, Document, Embeddings, Span, SyntheticSpec};
use petra::evaluation::{self, MemoryLog};
use petra::link::{self, TraceMatrix};
use petra::memory::Variant;
use petra::model::{ModelConfig, PetraModel};
use petra::nn::Parameterized;
use petra_cli::{apply_seed, execute, CliError, Command, Invocation, RunConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn core_err(e: petra::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Invalid(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    match name {
        "vanilla" => Ok(Variant::Vanilla),
        "learned_init" => Ok(Variant::LearnedInit),
        "fixed_key" => Ok(Variant::FixedKey),
        _ => Err(PyValueError::new_err(format!(
            "unknown variant `{name}`; expected vanilla, learned_init or fixed_key"
        ))),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("{what} rows differ in length")));
    }
    Ok((rows.len(), width, rows.iter().flatten().copied().collect()))
}

/// Entity tracker with frozen weights.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: PetraModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim = 3072, hidden_dim = 300, num_cells = 8, variant = "vanilla", key_dim = 20,
                        gamma = 0.98, dropout = 0.5, coref_usage_threshold = 0.0, mlp_hidden = 300,
                        mlp_layers = 2, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_cells: usize,
        variant: &str,
        key_dim: usize,
        gamma: f64,
        dropout: f64,
        coref_usage_threshold: f64,
        mlp_hidden: usize,
        mlp_layers: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            input_dim,
            hidden_dim,
            num_cells,
            variant: parse_variant(variant)?,
            key_dim,
            gamma,
            dropout,
            coref_usage_threshold,
            mlp_hidden,
            mlp_layers,
            ..ModelConfig::default()
        };
        Ok(PyModel { inner: PetraModel::new(config, seed).map_err(core_err)? })
    }

    /// Best validated model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = checkpoint::load(&path).map_err(core_err)?;
        Ok(PyModel { inner: state.best_model().clone() })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.config.num_cells
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.config.input_dim
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    /// Runs the controller over a `T × D` embedding matrix and returns the per-token
    /// `e`, `n` and per-cell `o`, `c`, `u` as nested lists.
    #[pyo3(signature = (embeddings, seed = 0))]
    fn infer<'py>(&self, py: Python<'py>, embeddings: Vec<Vec<f64>>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let (t, d, flat) = matrix(&embeddings, "embedding")?;
        let emb = Embeddings::new(t, d, flat.iter().map(|&v| v as f32).collect()).map_err(core_err)?;
        let tokens = (0..t).map(|k| format!("t{k}")).collect();
        let offsets = (0..t).map(|k| (k, k + 1)).collect();
        let doc = Document::new("py", tokens, offsets, emb).map_err(core_err)?;
        let traces = self.inner.infer(&doc, seed).map_err(core_err)?;
        let out = PyDict::new(py);
        out.set_item("e", traces.iter().map(|s| s.e).collect::<Vec<_>>())?;
        out.set_item("n", traces.iter().map(|s| s.n).collect::<Vec<_>>())?;
        out.set_item("o", traces.iter().map(|s| s.o.clone()).collect::<Vec<_>>())?;
        out.set_item("c", traces.iter().map(|s| s.c.clone()).collect::<Vec<_>>())?;
        out.set_item("u", traces.iter().map(|s| s.u.clone()).collect::<Vec<_>>())?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(variant={}, input_dim={}, hidden_dim={}, num_cells={}, parameters={})",
            c.variant,
            c.input_dim,
            c.hidden_dim,
            c.num_cells,
            self.inner.parameter_count()
        )
    }
}

fn span_tuple(s: Span) -> (usize, usize) {
    (s.first, s.last)
}

/// Synthetic documents as dicts with tokens, embeddings, spans, labels and the people count.
#[pyfunction]
#[pyo3(signature = (num_docs = 10, seed = 7, embed_dim = 32))]
fn generate_synthetic<'py>(py: Python<'py>, num_docs: usize, seed: u64, embed_dim: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = SyntheticSpec { num_docs, seed, embed_dim, ..SyntheticSpec::default() };
    let corpus = generate(&spec).map_err(core_err)?;
    let mut docs = Vec::with_capacity(num_docs);
    for (inst, rec) in corpus.instances.iter().zip(&corpus.records) {
        let d = PyDict::new(py);
        let emb = &inst.doc.embeddings;
        let rows: Vec<Vec<f64>> = (0..emb.rows()).map(|t| emb.row(t).iter().map(|&v| f64::from(v)).collect()).collect();
        d.set_item("id", &inst.doc.id)?;
        d.set_item("tokens", &inst.doc.tokens)?;
        d.set_item("embeddings", rows)?;
        d.set_item("span_a", span_tuple(inst.span_a))?;
        d.set_item("span_b", span_tuple(inst.span_b))?;
        d.set_item("span_p", span_tuple(inst.span_p))?;
        d.set_item("label_a", inst.label_a)?;
        d.set_item("label_b", inst.label_b)?;
        d.set_item("people", rec.people())?;
        docs.push(d);
    }
    Ok(docs)
}

fn traces(o: &[Vec<f64>], c: &[Vec<f64>]) -> PyResult<TraceMatrix> {
    let (t, n, o) = matrix(o, "o")?;
    let (tc, nc, c) = matrix(c, "c")?;
    if (t, n) != (tc, nc) {
        return Err(PyValueError::new_err("o and c must have the same shape"));
    }
    TraceMatrix::new(t, n, o, c).map_err(core_err)
}

/// Probability that tokens `t1 < t2` end up in the same cell, from `T × N` overwrite and coref traces.
#[pyfunction]
fn link_probability(o: Vec<Vec<f64>>, c: Vec<Vec<f64>>, t1: usize, t2: usize) -> PyResult<f64> {
    link::link_probability(&traces(&o, &c)?, t1, t2).map_err(core_err)
}

/// Best `(threshold, f1)` over the grid 0.01..1.00.
#[pyfunction]
fn sweep_threshold_f1(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("one label per score"));
    }
    let s = evaluation::sweep_threshold_f1(&scores, &labels);
    Ok((s.best_threshold(), s.best_value()))
}

fn logs(overwrites: &[Vec<Vec<f64>>]) -> PyResult<Vec<MemoryLog>> {
    overwrites
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let (t, n, flat) = matrix(o, "o")?;
            Ok(MemoryLog {
                doc_id: format!("d{k}"),
                num_cells: n,
                tokens: vec![String::new(); t],
                e: vec![0.0; t],
                o: flat,
                c: vec![0.0; t * n],
                u: vec![0.0; t * n],
            })
        })
        .collect()
}

/// Best `(alpha, total_error)` for per-document overwrite matrices against gold counts.
#[pyfunction]
fn sweep_threshold_count(overwrites: Vec<Vec<Vec<f64>>>, gold: Vec<usize>) -> PyResult<(f64, f64)> {
    if overwrites.len() != gold.len() {
        return Err(PyValueError::new_err("one gold count per document"));
    }
    let s = evaluation::sweep_threshold_count(&logs(&overwrites)?, &gold);
    Ok((s.best_threshold(), s.best_value()))
}

/// KL divergence of the average overwrite distribution from uniform; `None` without overwrites.
#[pyfunction]
fn overwrite_kl(overwrites: Vec<Vec<Vec<f64>>>) -> PyResult<Option<f64>> {
    Ok(evaluation::overwrite_kl(&logs(&overwrites)?).map_err(core_err)?.value())
}

/// Runs a CLI command in-process and returns its manifest as a dict.
#[pyfunction]
#[pyo3(signature = (command, out, config = None, seed = None, checkpoint = None))]
fn run_command<'py>(
    py: Python<'py>,
    command: &str,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let command: Command = serde_json::from_value(serde_json::Value::String(command.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown command `{command}`")))?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(cli_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        apply_seed(&mut cfg, command, s);
    }
    let manifest = execute(&Invocation { command, config: cfg, out, checkpoint }).map_err(cli_err)?;
    let json = serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

#[pymodule]
fn petra_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(link_probability, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_threshold_f1, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_threshold_count, m)?)?;
    m.add_function(wrap_pyfunction!(overwrite_kl, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_match_the_config_spelling() {
        for v in Variant::ALL {
            assert_eq!(parse_variant(&v.to_string()).unwrap(), v);
        }
    }

    #[test]
    fn ragged_matrices_are_rejected() {
        assert!(matrix(&[vec![1.0, 2.0], vec![3.0]], "o").is_err());
        let (t, n, flat) = matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]], "o").unwrap();
        assert_eq!((t, n), (2, 2));
        assert_eq!(flat, [1.0, 2.0, 3.0, 4.0]);
    }
}
