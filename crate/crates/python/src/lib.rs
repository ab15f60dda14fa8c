//! Python bindings: the pipeline verbs plus the action codec and the
//! conformal threshold helpers.

use std::path::PathBuf;

use confdqn::agents::Algorithm;
use confdqn::config::RunConfig;
use confdqn::conformal::{confident_set as core_confident_set, CalibrationResult};
use confdqn::mdp::action::{decode_index, encode_action as core_encode, ActionTriple};
use confdqn::pipeline;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(confdqn_py, ConfdqnError, PyException, "Pipeline failure; args are (message, exit_code).");

fn py_err(e: confdqn::Error) -> PyErr {
    ConfdqnError::new_err((e.to_string(), e.exit_code()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    py_err(confdqn::Error::from(e))
}

fn load(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    RunConfig::for_invocation(config.as_deref(), out, seed).map_err(py_err)
}

/// Simulates and writes the dataset; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None))]
fn gen_data(py: Python<'_>, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let cfg = load(config, out, seed)?;
    let m = py.detach(|| pipeline::gen_data(&cfg)).map_err(py_err)?;
    serde_json::to_string_pretty(&m).map_err(json_err)
}

/// Trains one algorithm or every configured one; returns summary lines.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None, algorithm=None))]
fn train(
    py: Python<'_>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    algorithm: Option<&str>,
) -> PyResult<Vec<String>> {
    let cfg = load(config, out, seed)?;
    let algs = match algorithm {
        Some(a) => vec![a.parse::<Algorithm>().map_err(py_err)?],
        None => cfg.algorithms_sorted(),
    };
    py.detach(|| {
        algs.into_iter()
            .map(|a| pipeline::train_algorithm(&cfg, a).map(|s| s.to_string()))
            .collect::<confdqn::Result<Vec<_>>>()
    })
    .map_err(py_err)
}

/// Calibrates every ConformalDQN run; returns `(run, n, alpha, tau)` rows.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None, alpha=None))]
fn calibrate(
    py: Python<'_>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    alpha: Option<f64>,
) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let mut cfg = load(config, out, seed)?;
    if let Some(a) = alpha {
        cfg.agents.get_mut(Algorithm::ConformalDqn).alpha = Some(a);
        cfg.validate().map_err(py_err)?;
    }
    Ok(py.detach(|| pipeline::calibrate_runs(&cfg)).map_err(py_err)?.runs)
}

#[pyfunction]
#[pyo3(signature = (alpha, config=None, out=None, seed=None))]
fn retune(
    py: Python<'_>,
    alpha: f64,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let cfg = load(config, out, seed)?;
    Ok(py.detach(|| pipeline::retune_runs(&cfg, alpha)).map_err(py_err)?.runs)
}

/// Runs FQE over every trained policy; returns `eval/report.json` contents.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None))]
fn evaluate(py: Python<'_>, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let cfg = load(config, out, seed)?;
    let (report, _) = py.detach(|| pipeline::evaluate_runs(&cfg)).map_err(py_err)?;
    serde_json::to_string_pretty(&report).map_err(json_err)
}

/// Writes `report.md`; returns its path.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None))]
fn report(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<PathBuf> {
    let cfg = load(config, out, seed)?;
    pipeline::write_report(&cfg.out_dir).map_err(py_err)
}

#[pyfunction]
fn encode_action(vt: u8, peep: u8, fio2: u8) -> PyResult<usize> {
    let t = ActionTriple::new(vt, peep, fio2).map_err(py_err)?;
    Ok(core_encode(t).map_err(py_err)?.get())
}

#[pyfunction]
fn decode_action(index: usize) -> PyResult<(u8, u8, u8)> {
    let [vt, peep, fio2] = decode_index(index).map_err(py_err)?.components();
    Ok((vt, peep, fio2))
}

/// Conformal threshold of nonconformity scores at level `alpha`.
#[pyfunction]
fn conformal_threshold(scores: Vec<f64>, alpha: f64) -> PyResult<f64> {
    Ok(CalibrationResult::from_scores(scores, alpha).map_err(py_err)?.tau)
}

/// Actions whose probability is at least `1 - tau`.
#[pyfunction]
fn confident_set(probs: Vec<f64>, tau: f64) -> Vec<usize> {
    core_confident_set(&probs, tau)
}

#[pymodule]
fn confdqn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfdqnError", m.py().get_type::<ConfdqnError>())?;
    m.add("N_ACTIONS", confdqn::mdp::action::N_ACTIONS)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(retune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(encode_action, m)?)?;
    m.add_function(wrap_pyfunction!(decode_action, m)?)?;
    m.add_function(wrap_pyfunction!(conformal_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(confident_set, m)?)?;
    Ok(())
}
