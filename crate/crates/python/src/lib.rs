//! Python bindings: codebooks, thresholds, model snapshots, black-box
//! verification (with any Python callable as the label oracle) and the
//! run-directory commands.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use blackcatt_core::attack::{AttackTemplate, CollusionSpec, MergeOp, PruneScope};
use blackcatt_core::config::ExperimentConfig;
use blackcatt_core::error::exit;
use blackcatt_core::experiment::{cmd_accuse, cmd_attack, cmd_train, AccuseFlags};
use blackcatt_core::model::{ArchDescriptor, ModelCopy};
use blackcatt_core::tardos::{self, CutoffSampler};
use blackcatt_core::verify::{self, AccusationReport, VerifyMode, VerifyOptions};
use blackcatt_core::watermark::TriggerSet;
use blackcatt_core::Error;

create_exception!(blackcatt, BlackcattError, PyException);
create_exception!(blackcatt, ConfigError, BlackcattError);
create_exception!(blackcatt, MissingArtifactError, BlackcattError);
create_exception!(blackcatt, NumericalError, BlackcattError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        exit::CONFIG => ConfigError::new_err(msg),
        exit::MISSING_ARTIFACT => MissingArtifactError::new_err(msg),
        exit::NUMERICAL => NumericalError::new_err(msg),
        _ => BlackcattError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for blackcatt_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_mode(mode: &str) -> PyResult<VerifyMode> {
    match mode {
        "full-set" => Ok(VerifyMode::FullSet),
        "stop-at-first" => Ok(VerifyMode::StopAtFirst),
        _ => Err(ConfigError::new_err(format!("unknown mode {mode:?}; expected full-set or stop-at-first"))),
    }
}

/// Secret q-ary fingerprinting code.
#[pyclass(name = "Codebook", module = "blackcatt", frozen)]
struct PyCodebook(tardos::Codebook);

#[pymethods]
impl PyCodebook {
    #[new]
    #[pyo3(signature = (n_owners, n_triggers, q=10, kappa=0.5, tau=None, seed=0, sampler="rejection"))]
    fn new(n_owners: usize, n_triggers: usize, q: usize, kappa: f64, tau: Option<f64>, seed: u64, sampler: &str) -> PyResult<Self> {
        let sampler = match sampler {
            "rejection" => CutoffSampler::Rejection,
            "gibbs" => CutoffSampler::Gibbs,
            _ => return Err(ConfigError::new_err(format!("unknown sampler {sampler:?}"))),
        };
        let tau = tau.unwrap_or(0.1 / q as f64);
        tardos::Codebook::generate_with(sampler, n_owners, n_triggers, q, kappa, tau, seed)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        tardos::Codebook::load(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn n_owners(&self) -> usize {
        self.0.n_owners
    }

    #[getter]
    fn n_triggers(&self) -> usize {
        self.0.n_triggers
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    fn label(&self, owner: usize, trigger: usize) -> PyResult<usize> {
        if owner >= self.0.n_owners || trigger >= self.0.n_triggers {
            return Err(pyo3::exceptions::PyIndexError::new_err("owner or trigger out of range"));
        }
        Ok(self.0.label(owner, trigger))
    }

    fn owner_labels(&self, owner: usize) -> PyResult<Vec<usize>> {
        if owner >= self.0.n_owners {
            return Err(pyo3::exceptions::PyIndexError::new_err("owner out of range"));
        }
        Ok(self.0.owner_labels(owner))
    }

    fn bias(&self, trigger: usize) -> PyResult<Vec<f64>> {
        if trigger >= self.0.n_triggers {
            return Err(pyo3::exceptions::PyIndexError::new_err("trigger out of range"));
        }
        Ok(self.0.bias(trigger).probs().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Codebook(n_owners={}, n_triggers={}, q={}, tau={})",
            self.0.n_owners, self.0.n_triggers, self.0.q, self.0.tau
        )
    }
}

/// Model snapshot.
#[pyclass(name = "Model", module = "blackcatt")]
struct PyModel(ModelCopy);

#[pymethods]
impl PyModel {
    /// `arch` uses the snapshot descriptor form, e.g. `mlp;in=32;hidden=128,128;bn=1;q=10`.
    #[new]
    #[pyo3(signature = (arch=None, seed=0))]
    fn new(arch: Option<&str>, seed: u64) -> PyResult<Self> {
        let arch: ArchDescriptor = match arch {
            Some(s) => s.parse().py()?,
            None => ArchDescriptor::default(),
        };
        ModelCopy::init(&arch, seed).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ModelCopy::load(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn arch(&self) -> String {
        self.0.arch.to_string()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.arch.input_dim
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.arch.param_count()
    }

    /// Flat state: parameters followed by BN running statistics.
    fn state(&self) -> Vec<f64> {
        self.0.flatten().to_vec()
    }

    fn logits(&self, inputs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward(&inputs).py()
    }

    fn predict(&self, inputs: Vec<f64>) -> PyResult<Vec<usize>> {
        self.0.predict_labels(&inputs).py()
    }

    fn accuracy(&self, inputs: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
        self.0.accuracy(&inputs, &labels).py()
    }

    fn __repr__(&self) -> String {
        format!("Model({}, tag={}, round={})", self.0.arch, self.0.tag, self.0.round)
    }
}

/// Trigger inputs and their L-infinity budget.
#[pyclass(name = "TriggerSet", module = "blackcatt", frozen)]
struct PyTriggerSet(TriggerSet);

#[pymethods]
impl PyTriggerSet {
    #[new]
    #[pyo3(signature = (n_triggers, input_dim, alpha=64.0, seed=0))]
    fn new(n_triggers: usize, input_dim: usize, alpha: f64, seed: u64) -> PyResult<Self> {
        TriggerSet::init(n_triggers, input_dim, alpha, seed).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TriggerSet::load(&path).py().map(Self)
    }

    #[getter]
    fn n_triggers(&self) -> usize {
        self.0.n_triggers
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim
    }

    #[getter]
    fn version(&self) -> u32 {
        self.0.version
    }

    /// Current triggers, row-major `[T, input_dim]`.
    fn current(&self) -> Vec<f64> {
        self.0.current().to_vec()
    }

    fn max_deviation(&self) -> f64 {
        self.0.max_deviation()
    }
}

/// Result of a verification session.
#[pyclass(name = "Report", module = "blackcatt", frozen)]
struct PyReport(AccusationReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn accused(&self) -> Vec<usize> {
        self.0.accused.clone()
    }

    #[getter]
    fn t_star(&self) -> usize {
        self.0.t_star
    }

    #[getter]
    fn queries(&self) -> usize {
        self.0.queries
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.0.final_scores.clone()
    }

    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.0.threshold
    }

    #[getter]
    fn complete(&self) -> bool {
        self.0.complete
    }

    fn ranking(&self) -> Vec<usize> {
        self.0.ranking()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    fn __repr__(&self) -> String {
        format!("Report(accused={:?}, t_star={}, queries={})", self.0.accused, self.0.t_star, self.0.queries)
    }
}

/// Accusation threshold after `t` queries.
#[pyfunction]
fn threshold(t: usize, eps_fp: f64, tau: f64) -> PyResult<f64> {
    tardos::threshold(t, eps_fp, tau).py()
}

/// Per-query score of an owner assigned `assigned` when `observed` came back
/// and the observed label had probability `p`.
#[pyfunction]
fn score(assigned: usize, observed: usize, p: f64) -> PyResult<f64> {
    tardos::score(assigned, observed, p).py()
}

/// Runs verification. `oracle` is either a `Model` or a callable taking a
/// list of floats and returning a label.
#[pyfunction]
#[pyo3(signature = (oracle, triggers, input_dim, codebook, eps_fp=1e-6, mode="full-set", shuffle_seed=None))]
fn verify_model(
    py: Python<'_>,
    oracle: &Bound<'_, PyAny>,
    triggers: Vec<f64>,
    input_dim: usize,
    codebook: &PyCodebook,
    eps_fp: f64,
    mode: &str,
    shuffle_seed: Option<u64>,
) -> PyResult<PyReport> {
    let opts = VerifyOptions {
        eps_fp,
        mode: parse_mode(mode)?,
        shuffle_seed,
    };
    if let Ok(model) = oracle.cast::<PyModel>() {
        let mut m = model.borrow().0.clone();
        return py
            .detach(|| verify::verify(&mut m, &triggers, input_dim, &codebook.0, &opts))
            .py()
            .map(PyReport);
    }
    let mut call = |x: &[f64]| -> blackcatt_core::Result<usize> {
        oracle
            .call1((x.to_vec(),))
            .and_then(|r| r.extract::<usize>())
            .map_err(|e| Error::Oracle(e.to_string()))
    };
    verify::verify(&mut call, &triggers, input_dim, &codebook.0, &opts)
        .py()
        .map(PyReport)
}

/// Trains a federation from a TOML configuration into `out`; returns the
/// final mean test accuracy.
#[pyfunction]
#[pyo3(signature = (config_toml, out))]
fn train(py: Python<'_>, config_toml: &str, out: PathBuf) -> PyResult<Option<f64>> {
    let cfg = ExperimentConfig::from_toml(config_toml).py()?;
    py.detach(|| cmd_train(&cfg, &out)).py().map(|t| t.manifest.final_test_acc)
}

/// Merges the given owners' final copies, optionally pruning, and saves the
/// result to `output`. Returns the merged model.
#[pyfunction]
#[pyo3(signature = (run_dir, owners, output, merge="average", prune=0.0, seed=0))]
fn attack(py: Python<'_>, run_dir: PathBuf, owners: Vec<usize>, output: PathBuf, merge: &str, prune: f64, seed: u64) -> PyResult<PyModel> {
    let merge = match merge {
        "average" => MergeOp::Average,
        "layer-sample" => MergeOp::LayerSample,
        _ => return Err(ConfigError::new_err(format!("unknown merge {merge:?}"))),
    };
    let spec = CollusionSpec {
        template: AttackTemplate {
            colluders: owners.len(),
            merge,
            prune_ratio: prune,
            prune_scope: PruneScope::Global,
            ..AttackTemplate::default()
        },
        colluders: owners,
        seed,
    };
    py.detach(|| cmd_attack(&run_dir, &spec, None, &output))
        .py()
        .map(|(m, _)| PyModel(m))
}

/// Verifies a suspect snapshot against a run's secrets.
#[pyfunction]
#[pyo3(signature = (run_dir, suspect, eps_fp=None, mode="full-set"))]
fn accuse(py: Python<'_>, run_dir: PathBuf, suspect: PathBuf, eps_fp: Option<f64>, mode: &str) -> PyResult<PyReport> {
    let flags = AccuseFlags {
        eps_fp,
        mode: parse_mode(mode)?,
        ..AccuseFlags::default()
    };
    py.detach(|| cmd_accuse(&run_dir, &suspect, &flags)).py().map(PyReport)
}

#[pymodule]
fn blackcatt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("BlackcattError", py.get_type::<BlackcattError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("MissingArtifactError", py.get_type::<MissingArtifactError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTriggerSet>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(verify_model, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(accuse, m)?)?;
    Ok(())
}
