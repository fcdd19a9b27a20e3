//! Python bindings. Structured results (distance matrices, gap reports, PPL
//! reports, selections) come back as plain dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use protogap_core::corpus::TokenCorpus;
use protogap_core::evaluator::{self, EvalContract, RankKind};
use protogap_core::fixtures::{self, FixtureSpec};
use protogap_core::jacobian::{self, PowerConfig};
use protogap_core::metrics::{self, ClassifierThresholds, DistanceProbe, PairFilter, Positions, Protocol, RegimeConfig};
use protogap_core::model::{self, InterventionSpec};
use protogap_core::selectors;

create_exception!(protogap, ProtogapError, PyException);
create_exception!(protogap, ContractMismatchError, ProtogapError);

fn err(e: protogap_core::Error) -> PyErr {
    match e {
        protogap_core::Error::ContractMismatch { .. } => ContractMismatchError::new_err(e.to_string()),
        _ => ProtogapError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ProtogapError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = protogap_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn specs(interventions: Vec<String>) -> PyResult<Vec<InterventionSpec>> {
    interventions.iter().map(|s| parse(s)).collect()
}

/// A loaded model checkpoint.
#[pyclass(module = "protogap", frozen)]
struct Checkpoint {
    inner: model::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(path).map_err(err)?,
        })
    }

    /// Random fixture model: `preset` is one of gpt2, llama, qwen, bloom, neox.
    #[staticmethod]
    #[pyo3(signature = (preset, layers, seed=0))]
    fn fixture(preset: &str, layers: usize, seed: u64) -> PyResult<Self> {
        let spec = match preset {
            "gpt2" => FixtureSpec::gpt2(layers),
            "llama" => FixtureSpec::llama(layers),
            "qwen" => FixtureSpec::qwen(layers),
            "bloom" => FixtureSpec::bloom(layers),
            "neox" => FixtureSpec::neox(layers),
            other => return Err(ProtogapError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok(Self {
            inner: fixtures::random_model(&spec, seed).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn payload_hash(&self) -> String {
        self.inner.payload_hash()
    }

    /// Logits, one row per position, under the given intervention specs
    /// (e.g. `"interchange:1,3"`, `"delete:2"`).
    #[pyo3(signature = (tokens, interventions=vec![]))]
    fn forward(&self, tokens: Vec<u32>, interventions: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        let out = model::forward(&self.inner, &tokens, &specs(interventions)?, false).map_err(err)?;
        Ok((0..out.logits.rows()).map(|r| out.logits.row(r).to_vec()).collect())
    }

    /// A smaller checkpoint with the given layers removed.
    fn pruned(&self, layers: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: model::materialize_pruned(&self.inner, &layers).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(layers={}, vocab={}, hash={})",
            self.inner.config.n_layers,
            self.inner.config.vocab_size,
            &self.inner.payload_hash()[..12]
        )
    }
}

/// A fixed set of token-id prompts.
#[pyclass(module = "protogap", frozen)]
struct PromptSet {
    inner: metrics::PromptSet,
}

#[pymethods]
impl PromptSet {
    #[new]
    #[pyo3(signature = (prompts, provenance="python"))]
    fn new(prompts: Vec<Vec<u32>>, provenance: &str) -> PyResult<Self> {
        Ok(Self {
            inner: metrics::PromptSet::new(provenance, prompts).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: metrics::PromptSet::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (vocab_size, count, length, seed=0))]
    fn random(vocab_size: usize, count: usize, length: usize, seed: u64) -> PyResult<Self> {
        Self::new(fixtures::random_prompts(vocab_size, count, length, seed), "random")
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn probe<'a>(m: &'a Checkpoint, p: &'a PromptSet, positions: &str) -> PyResult<DistanceProbe<'a>> {
    DistanceProbe::new(&m.inner, &p.inner, parse::<Positions>(positions)?).map_err(err)
}

/// Swap-KL distance record for one pair under `protocol`.
#[pyfunction]
#[pyo3(signature = (model, prompts, i, j, protocol="replacement", positions="last"))]
fn pair_distance(
    py: Python<'_>,
    model: &Checkpoint,
    prompts: &PromptSet,
    i: usize,
    j: usize,
    protocol: &str,
    positions: &str,
) -> PyResult<Py<PyAny>> {
    let rec = probe(model, prompts, positions)?
        .record(parse::<Protocol>(protocol)?, i, j)
        .map_err(err)?;
    to_py(py, &rec)
}

/// Distance matrix over the pairs admitted by `pairs` ("adjacent", "all", "gap:k").
#[pyfunction]
#[pyo3(signature = (model, prompts, protocol="replacement", pairs="adjacent", positions="last"))]
fn sweep(
    py: Python<'_>,
    model: &Checkpoint,
    prompts: &PromptSet,
    protocol: &str,
    pairs: &str,
    positions: &str,
) -> PyResult<Py<PyAny>> {
    let m = probe(model, prompts, positions)?
        .sweep(parse::<PairFilter>(pairs)?, parse::<Protocol>(protocol)?)
        .map_err(err)?;
    to_py(py, &m)
}

/// Replacement and interchange sweeps plus the regime verdict.
#[pyfunction]
#[pyo3(signature = (model, prompts, pairs="adjacent", positions="last", ir_override=None))]
fn diagnose(
    py: Python<'_>,
    model: &Checkpoint,
    prompts: &PromptSet,
    pairs: &str,
    positions: &str,
    ir_override: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let p = probe(model, prompts, positions)?;
    let filter = parse::<PairFilter>(pairs)?;
    let r = p.sweep(filter, Protocol::Replacement).map_err(err)?;
    let i = p.sweep(filter, Protocol::Interchange).map_err(err)?;
    let cfg = match ir_override {
        Some(v) => RegimeConfig::with_override(v, "pruning-dppl"),
        None => RegimeConfig::default(),
    };
    let gap = metrics::protocol_gap_report(&r, &i, &ClassifierThresholds::default(), &cfg).map_err(err)?;
    to_py(py, &gap)
}

/// Sliding-window perplexity of `model` on a token corpus file under a
/// built-in contract name or a contract file.
#[pyfunction]
#[pyo3(signature = (model, corpus, contract, interventions=vec![]))]
fn perplexity(
    py: Python<'_>,
    model: &Checkpoint,
    corpus: PathBuf,
    contract: &str,
    interventions: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let corpus = TokenCorpus::load(corpus).map_err(err)?;
    let contract = match EvalContract::builtin(contract, &corpus.id) {
        Some(c) => c,
        None => EvalContract::load(contract).map_err(err)?,
    };
    let r = evaluator::sliding_window_ppl(&model.inner, &corpus, &contract, &specs(interventions)?).map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (scores, n, spacing=1))]
fn greedy_select(py: Python<'_>, scores: Vec<f64>, n: usize, spacing: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &selectors::greedy_select(&scores, n, spacing))
}

#[pyfunction]
#[pyo3(signature = (n_layers, n, spacing=1, seed=0))]
fn random_select(py: Python<'_>, n_layers: usize, n: usize, spacing: usize, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(py, &selectors::random_select(n_layers, n, spacing, seed).map_err(err)?)
}

#[pyfunction]
fn sign_test(py: Python<'_>, deltas: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &evaluator::sign_test(&deltas).map_err(err)?)
}

/// Kendall tau-b (`kind="kendall"`) or Spearman rho.
#[pyfunction]
#[pyo3(signature = (a, b, kind="kendall"))]
fn rank_correlation(a: Vec<f64>, b: Vec<f64>, kind: &str) -> PyResult<f64> {
    let kind = match kind {
        "kendall" => RankKind::Kendall,
        "spearman" => RankKind::Spearman,
        other => return Err(ProtogapError::new_err(format!("unknown rank correlation `{other}`"))),
    };
    evaluator::rank_correlation(&a, &b, kind).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (samples, resamples=1000, level=0.95, seed=0))]
fn bootstrap_ci(py: Python<'_>, samples: Vec<f64>, resamples: usize, level: f64, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(py, &evaluator::bootstrap_ci(&samples, None, resamples, level, seed).map_err(err)?)
}

/// Spectral norm of one layer's residual-update Jacobian, per prompt.
#[pyfunction]
#[pyo3(signature = (model, prompts, layer, iterations=20, epsilon=1e-3, seed=42))]
fn jacobian_norm(
    py: Python<'_>,
    model: &Checkpoint,
    prompts: &PromptSet,
    layer: usize,
    iterations: usize,
    epsilon: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = PowerConfig {
        iterations,
        epsilon,
        seed,
    };
    to_py(
        py,
        &jacobian::residual_jacobian_norm(&model.inner, layer, &prompts.inner, &cfg).map_err(err)?,
    )
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("protogap".to_string()).chain(args);
    protogap_core::cli::run_command(argv)
}

#[pymodule]
fn protogap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProtogapError", m.py().get_type::<ProtogapError>())?;
    m.add("ContractMismatchError", m.py().get_type::<ContractMismatchError>())?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<PromptSet>()?;
    m.add_function(wrap_pyfunction!(pair_distance, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_select, m)?)?;
    m.add_function(wrap_pyfunction!(random_select, m)?)?;
    m.add_function(wrap_pyfunction!(sign_test, m)?)?;
    m.add_function(wrap_pyfunction!(rank_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_norm, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
