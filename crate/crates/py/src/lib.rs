//! Python bindings: scenario replay, synthetic data, checkpoints and the
//! memory benchmark. Everything crosses the boundary as strings or numbers.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use duplexssm::checkpoint::{load_tensors, BundleConfig, ModelBundle};
use duplexssm::duplex::{run_scenario, LmEngine, Scenario, ScriptedLm, SessionConfig};
use duplexssm::harness::{bench_memory_latency, gen_synthetic_dataset, scenario_library, synthetic, to_csv, BenchConfig, SyntheticTaskSpec};
use duplexssm::lm::LmConfig;
use duplexssm::numerics::DType;
use duplexssm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Replays scenario JSONL and returns the trace JSONL. Without `ckpt` the
/// scripted stub model answers.
#[pyfunction]
#[pyo3(signature = (scenario_jsonl, ckpt=None, seed=0, tick_ms=None, slice_ms=None))]
fn run(scenario_jsonl: &str, ckpt: Option<&str>, seed: u64, tick_ms: Option<u64>, slice_ms: Option<u64>) -> PyResult<String> {
    let sc = Scenario::parse_jsonl(scenario_jsonl).map_err(py_err)?;
    let mut cfg = SessionConfig {
        seed,
        ..SessionConfig::default()
    };
    cfg.tick_ms = tick_ms.unwrap_or(cfg.tick_ms);
    cfg.slice_ms = slice_ms.unwrap_or(cfg.slice_ms);
    let trace = match ckpt {
        None => run_scenario(&ScriptedLm::default(), &cfg, &sc),
        Some(p) => {
            let bundle = ModelBundle::load(Path::new(p)).map_err(py_err)?;
            run_scenario(&LmEngine::new(bundle).map_err(py_err)?, &cfg, &sc)
        }
    }
    .map_err(py_err)?;
    Ok(trace.to_jsonl())
}

/// Names of the bundled scenarios.
#[pyfunction]
fn scenario_names() -> Vec<&'static str> {
    scenario_library().iter().map(|s| s.name).collect()
}

/// Scenario JSONL of a bundled scenario.
#[pyfunction]
fn bundled_scenario(name: &str) -> PyResult<String> {
    scenario_library()
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.scenario.to_jsonl())
        .ok_or_else(|| PyValueError::new_err(format!("no bundled scenario named {name}")))
}

#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn gen_data(n: usize, seed: u64) -> PyResult<String> {
    let spec = SyntheticTaskSpec {
        seed,
        ..SyntheticTaskSpec::default()
    };
    Ok(synthetic::to_jsonl(&gen_synthetic_dataset(&spec, n).map_err(py_err)?))
}

/// Writes a randomly initialized token-only checkpoint (`tiny` or `small`).
#[pyfunction]
#[pyo3(signature = (path, preset="tiny", seed=0))]
fn init_checkpoint(path: &str, preset: &str, seed: u64) -> PyResult<()> {
    let lm = match preset {
        "tiny" => LmConfig::tiny(),
        "small" => LmConfig::small(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other}"))),
    };
    let cfg = BundleConfig {
        lm,
        encoder: None,
        adapter_k: 1,
        adapter_hidden: None,
    };
    ModelBundle::init(&cfg, DType::F32, seed).and_then(|b| b.save(Path::new(path))).map_err(py_err)
}

/// JSON header of a checkpoint file.
#[pyfunction]
fn checkpoint_header(path: &str) -> PyResult<String> {
    let (_, meta) = load_tensors(Path::new(path)).map_err(py_err)?;
    Ok(meta.map(|m| m.to_string()).unwrap_or_else(|| "null".into()))
}

/// Benchmark CSV for the checkpoint's language model. Peak bytes are 0 here
/// because the host process owns the allocator.
#[pyfunction(name = "bench")]
#[pyo3(signature = (ckpt, context_lengths, decode_tokens=16, seed=0))]
fn bench_csv(ckpt: &str, context_lengths: Vec<usize>, decode_tokens: usize, seed: u64) -> PyResult<String> {
    let bundle = ModelBundle::load(Path::new(ckpt)).map_err(py_err)?;
    let cfg = BenchConfig {
        decode_tokens,
        seed,
        ..BenchConfig::default()
    };
    Ok(to_csv(&bench_memory_latency(&bundle.lm, &context_lengths, &cfg).map_err(py_err)?))
}

#[pymodule]
fn duplexssm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(init_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_header, m)?)?;
    m.add_function(wrap_pyfunction!(bench_csv, m)?)?;
    Ok(())
}
