//! Python bindings: configs, checkpoints, training and the numeric
//! building blocks (closed-form KL with gradients, MMD, TER, controllers).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use senvae::checkpoint::Checkpoint;
use senvae::config::RunConfig;
use senvae::distributions::{self, KernelConfig};
use senvae::evaluation::{self, EvalOptions};
use senvae::models::Decoding;
use senvae::objectives::{self, SfbRule};
use senvae::pipeline::{self, ToyGrammarSpec};
use senvae::tensor::{Tape, Tensor};
use senvae::{seed, train, Error};

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    match e {
        Error::Io(_) | Error::Data(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Tuning(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration with the flat `section.key = value` format.
#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults; `preset="toy"` selects the small toy-corpus model.
    #[new]
    #[pyo3(signature = (preset = "ptb"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "ptb" => RunConfig::default(),
            "toy" => RunConfig::toy(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(py_err)? })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn keys(&self) -> Vec<&'static str> {
        self.inner.entries().into_iter().map(|(k, _)| k).collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(technique={}, out={})", self.inner.objective.technique.name(), self.inner.out.display())
    }
}

/// A trained model with its vocabulary.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Checkpoint,
}

impl PyModel {
    fn ids(&self, sentence: &str) -> Vec<usize> {
        self.inner.vocab.encode(&pipeline::tokenize(sentence))
    }

    fn text(&self, ids: &[usize]) -> String {
        pipeline::detokenize(&self.inner.vocab.decode(ids))
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.model.latent_dim()
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocab.entries().to_vec()
    }

    /// Posterior location and scale for each sentence.
    fn encode(&self, sentences: Vec<String>) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
        let ids: Vec<Vec<usize>> = sentences.iter().map(|s| self.ids(s)).collect();
        let qs = self.inner.model.posteriors(&ids).map_err(py_err)?;
        Ok(qs.iter().map(|q| (q.loc().to_vec(), q.scale().to_vec())).collect())
    }

    fn sample_prior(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        self.inner.model.sample_prior(n, &mut seed::rng(seed)).map_err(py_err)
    }

    /// Decode each code greedily, or ancestrally with `greedy=False`.
    #[pyo3(signature = (codes, greedy = true, seed = 0, max_len = 50))]
    fn decode(&self, codes: Vec<Vec<f64>>, greedy: bool, seed: u64, max_len: usize) -> PyResult<Vec<String>> {
        let mode = if greedy { Decoding::Greedy } else { Decoding::Ancestral };
        let out = self.inner.model.generate(&codes, mode, max_len, &mut seed::rng(seed)).map_err(py_err)?;
        Ok(out.iter().map(|ids| self.text(ids)).collect())
    }

    #[pyo3(signature = (a, b, steps = 7, seed = 0, max_len = 50))]
    fn homotopy(&self, a: &str, b: &str, steps: usize, seed: u64, max_len: usize) -> PyResult<Vec<String>> {
        let h = evaluation::homotopy(&self.inner.model, &self.ids(a), &self.ids(b), steps, seed, max_len)
            .map_err(py_err)?;
        Ok(h.decoded.iter().map(|ids| self.text(ids)).collect())
    }

    /// Importance-sampled report over `sentences` as a dict.
    #[pyo3(signature = (sentences, samples = 1000, seed = 0, intrinsic_only = true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        sentences: Vec<String>,
        samples: usize,
        seed: u64,
        intrinsic_only: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ids: Vec<Vec<usize>> = sentences.iter().map(|s| self.ids(s)).collect();
        let opts = EvalOptions { samples, seed, intrinsic_only, ..EvalOptions::default() };
        let r = evaluation::evaluate(&self.inner.model, &ids, &opts).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("nll", r.nll_mean)?;
        d.set_item("ppl", r.ppl)?;
        d.set_item("ppl_no_eos", r.ppl_no_eos)?;
        d.set_item("distortion", r.distortion)?;
        d.set_item("rate", r.rate)?;
        d.set_item("active_units", r.active_units)?;
        d.set_item("acc_gap", r.acc_gap)?;
        Ok(d)
    }
}

/// Train per `config` into its output directory; returns the validation
/// report as a dict.
#[pyfunction]
fn train_run<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let (outcome, r) = train::run_training(&config.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("best_epoch", outcome.best_epoch)?;
    d.set_item("steps", outcome.steps)?;
    d.set_item("nll", r.nll_mean)?;
    d.set_item("ppl", r.ppl)?;
    d.set_item("rate", r.rate)?;
    d.set_item("active_units", r.active_units)?;
    d.set_item("checkpoint", config.inner.out.join(train::CHECKPOINT_FILE))?;
    Ok(d)
}

/// Sentences of the seeded toy grammar.
#[pyfunction]
fn toy_corpus(n: usize, seed: u64) -> PyResult<Vec<String>> {
    let c = pipeline::generate_toy_corpus(&ToyGrammarSpec::default(), n, seed).map_err(py_err)?;
    Ok(c.sentences.iter().map(|s| pipeline::detokenize(s)).collect())
}

/// Summed `KL(N(loc, scale^2) || N(0, I))` over rows, with its gradients
/// with respect to `loc` and `scale` from reverse-mode differentiation.
#[pyfunction]
fn kl_standard(loc: Vec<Vec<f64>>, scale: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let l = tape.param(Tensor::from_rows(&loc).map_err(py_err)?);
    let s = tape.param(Tensor::from_rows(&scale).map_err(py_err)?);
    let kl = distributions::kl_standard_rows(&l, &s).map_err(py_err)?.sum();
    let value = kl.value().data()[0];
    let g = tape.backward(kl).map_err(py_err)?;
    let rows = |t: Tensor| (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect();
    Ok((value, rows(g.wrt(l)), rows(g.wrt(s))))
}

/// Unbiased MMD^2 with a Gaussian RBF kernel; median heuristic bandwidth
/// when `bandwidth` is omitted.
#[pyfunction]
#[pyo3(signature = (xs, ys, bandwidth = None))]
fn mmd(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let k = match bandwidth {
        Some(b) => KernelConfig::rbf(b).map_err(py_err)?,
        None => KernelConfig::median_heuristic(&xs, &ys),
    };
    distributions::mmd(&xs, &ys, &k).map_err(py_err)
}

#[pyfunction]
fn ter(hypothesis: &str, reference: &str) -> f64 {
    evaluation::ter(&pipeline::tokenize(hypothesis), &pipeline::tokenize(reference))
}

#[pyfunction]
#[pyo3(signature = (locs, threshold = evaluation::AU_THRESHOLD))]
fn active_units(locs: Vec<Vec<f64>>, threshold: f64) -> PyResult<usize> {
    evaluation::active_units(&locs, threshold).map_err(py_err)
}

#[pyfunction]
fn mdr_dual_update(u: f64, rate: f64, target: f64, rho: f64) -> f64 {
    objectives::mdr_dual_update(u, rate, target, rho)
}

#[pyfunction]
#[pyo3(signature = (beta, rate, target, omega = 0.01, gamma = 1.05, epsilon = 1.0, beta_min = 1e-4, beta_max = 1.0))]
#[allow(clippy::too_many_arguments)]
fn sfb_update(
    beta: f64,
    rate: f64,
    target: f64,
    omega: f64,
    gamma: f64,
    epsilon: f64,
    beta_min: f64,
    beta_max: f64,
) -> f64 {
    objectives::sfb_update(beta, rate, target, &SfbRule { omega, gamma, epsilon, beta_min, beta_max })
}

#[pymodule]
fn senvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(kl_standard, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(ter, m)?)?;
    m.add_function(wrap_pyfunction!(active_units, m)?)?;
    m.add_function(wrap_pyfunction!(mdr_dual_update, m)?)?;
    m.add_function(wrap_pyfunction!(sfb_update, m)?)?;
    Ok(())
}
