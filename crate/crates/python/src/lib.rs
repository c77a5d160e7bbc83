//! Python bindings: the ground-truth user, exact inference, learned models,
//! trained policies and the experiment pipeline.
//!
//! Slates and beliefs cross the boundary as plain lists of floats, choices
//! as bin indices, and configs as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prefshift::episode::{OracleShiftEstimator, Recommender, UserSource};
use prefshift::experiment::{self, ExperimentConfig};
use prefshift::metrics::{evaluate_policy, EvalConfig};
use prefshift::model::SequenceModel;
use prefshift::oracle::Oracle as CoreOracle;
use prefshift::policy::ppo::LstmPolicy as CoreLstmPolicy;
use prefshift::policy::random_policy;
use prefshift::rollout::simulate_cohort;
use prefshift::{Item, PrefSpace, Slate};

fn err(e: prefshift::Error) -> PyErr {
    PyValueError::new_err(format!("[{}] {e}", e.kind()))
}

fn slates(v: Vec<Vec<f64>>) -> PyResult<Vec<Slate>> {
    v.into_iter().map(|s| Slate::new(s).map_err(err)).collect()
}

fn items(v: Vec<usize>) -> Vec<Item> {
    v.into_iter().map(Item).collect()
}

/// The simulated ground-truth user.
#[pyclass(module = "prefshift_py", frozen)]
struct UserModel {
    inner: prefshift::UserModel,
}

#[pymethods]
impl UserModel {
    /// Default user, or one built from a JSON user config.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: experiment::UserConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => Default::default(),
        };
        Ok(Self { inner: cfg.build().map_err(err)? })
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.inner.n_bins()
    }

    #[getter]
    fn beta_c(&self) -> Vec<f64> {
        self.inner.params().beta_c_field.clone()
    }

    fn uniform_slate(&self) -> Vec<f64> {
        self.inner.space().uniform_slate().into_inner()
    }

    fn wrapped_gaussian_slate(&self, mean_deg: f64, std_deg: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.space().wrapped_gaussian_slate(mean_deg, std_deg).map_err(err)?.into_inner())
    }

    fn choice_distribution(&self, pref: usize, slate: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.user_choice_distribution(pref, &Slate::new(slate).map_err(err)?).map_err(err)
    }

    /// Trajectories of `n_users` users under the random recommender, as JSON lines.
    fn simulate_random(&self, n_users: usize, horizon: usize, seed: u64) -> PyResult<Vec<String>> {
        let rnd = random_policy(self.inner.space());
        let trajs = simulate_cohort(&self.inner, &rnd, n_users, horizon, seed).map_err(err)?;
        trajs.iter().map(|t| serde_json::to_string(t).map_err(|e| PyValueError::new_err(e.to_string()))).collect()
    }
}

/// Exact inference under known dynamics.
#[pyclass(module = "prefshift_py", frozen)]
struct Oracle {
    inner: CoreOracle,
}

#[pymethods]
impl Oracle {
    #[new]
    fn new(user: &UserModel) -> Self {
        Self { inner: CoreOracle::new(user.inner.clone()) }
    }

    /// Belief over the next preference after the given history.
    fn filter(&self, slates_: Vec<Vec<f64>>, choices: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self.inner.filter_sequence(&slates(slates_)?, &items(choices)).map_err(err)?.into_inner())
    }

    /// Belief over the initial preference after the given history.
    fn smooth_initial(&self, slates_: Vec<Vec<f64>>, choices: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self.inner.smooth_initial(&slates(slates_)?, &items(choices)).map_err(err)?.into_inner())
    }
}

/// A trained sequence model checkpoint.
#[pyclass(module = "prefshift_py", frozen)]
struct LearnedModel {
    inner: SequenceModel,
}

#[pymethods]
impl LearnedModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SequenceModel::load(path.as_ref()).map_err(err)? })
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task().to_string()
    }

    /// Predicted belief over the next preference (future-task models).
    fn predict_next(&self, slates_: Vec<Vec<f64>>, choices: Vec<usize>) -> PyResult<Vec<f64>> {
        let m = self.inner.predict_next(&slates(slates_)?, &items(choices)).map_err(err)?;
        Ok(m.density_at_bins(&PrefSpace::new(self.inner.n_bins()).map_err(err)?))
    }
}

/// A trained recurrent recommender.
#[pyclass(module = "prefshift_py", frozen)]
struct Policy {
    inner: CoreLstmPolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreLstmPolicy::load(path.as_ref()).map_err(err)? })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    /// Oracle-mode metrics as a dict of means and standard errors.
    #[pyo3(signature = (user, n_traj=1000, seed=0))]
    fn evaluate(&self, py: Python<'_>, user: &UserModel, n_traj: usize, seed: u64) -> PyResult<Py<PyAny>> {
        evaluate(py, &self.inner, &user.inner, n_traj, seed)
    }
}

fn evaluate(
    py: Python<'_>,
    rec: &dyn Recommender,
    user: &prefshift::UserModel,
    n_traj: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let est = OracleShiftEstimator::new(CoreOracle::new(user.clone())).map_err(err)?;
    let cfg = EvalConfig { n_traj, ..Default::default() };
    let rep = py.detach(|| evaluate_policy(rec, &est, UserSource::GroundTruth(user), &cfg, seed)).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    let (m, s) = (&rep.mean, &rep.se);
    for (k, v) in [("eng", m.eng), ("eng_u0", m.eng_u0), ("eng_nps", m.eng_nps), ("sum", m.sum)] {
        d.set_item(k, v)?;
    }
    for (k, v) in [("se_eng", s.eng), ("se_eng_u0", s.eng_u0), ("se_eng_nps", s.eng_nps), ("se_sum", s.sum)] {
        d.set_item(k, v)?;
    }
    Ok(d.into_any().unbind())
}

/// Oracle-mode metrics of the random recommender.
#[pyfunction]
#[pyo3(signature = (user, n_traj=1000, seed=0))]
fn evaluate_random(py: Python<'_>, user: &UserModel, n_traj: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let rec = prefshift::episode::PolicyRecommender(random_policy(user.inner.space()));
    evaluate(py, &rec, &user.inner, n_traj, seed)
}

/// The default experiment config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run the whole pipeline for a JSON config; returns the summary as JSON.
#[pyfunction]
fn run_all(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let summary = py.detach(|| experiment::run_all(&cfg, |_| {})).map_err(err)?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn prefshift_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<UserModel>()?;
    m.add_class::<Oracle>()?;
    m.add_class::<LearnedModel>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(evaluate_random, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
