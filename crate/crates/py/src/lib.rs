//! Python bindings: the predictor, the per-agent adapter, ADE and the
//! dataset helpers. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajadapt::dataio::{self, ScenarioSpec};
use trajadapt::edn::{self, EdnParams, PredictionContext};
use trajadapt::geom::EgoFrame;
use trajadapt::mekf::{AdaptConfig, AdaptState};
use trajadapt::metrics;
use trajadapt::nn::LayerId;
use trajadapt::numkit::Mat;
use trajadapt::runner::{self, RunConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_mat(rows: &[Vec<f64>]) -> PyResult<Mat> {
    Mat::from_rows(rows).map_err(value_err)
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn context(history: &[Vec<f64>], goal: (f64, f64)) -> PyResult<PredictionContext> {
    Ok(PredictionContext {
        history: to_mat(history)?,
        goal: [goal.0, goal.1],
        frame: EgoFrame::IDENTITY,
    })
}

fn layer_from(name: &str) -> PyResult<LayerId> {
    LayerId::ALL
        .into_iter()
        .find(|l| l.name() == name)
        .ok_or_else(|| value_err(format!("unknown layer '{name}'")))
}

/// Encoder-decoder predictor. Histories are `T_h × 4` ego-frame rows
/// `(x, y, vx, vy)`; predictions are `horizon × 2` ego-frame positions.
#[pyclass(module = "trajadapt_py", skip_from_py_object)]
#[derive(Clone)]
struct Predictor {
    params: EdnParams,
}

#[pymethods]
impl Predictor {
    #[staticmethod]
    #[pyo3(signature = (hidden, seed = 0))]
    fn init(hidden: usize, seed: u64) -> Self {
        Self {
            params: EdnParams::init(hidden, seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: edn::load_model(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        edn::save_model(&path, &self.params, None).map_err(value_err)
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.hidden
    }

    fn layer_size(&self, layer: &str) -> PyResult<usize> {
        Ok(self.params.layer_len(layer_from(layer)?))
    }

    #[pyo3(signature = (history, goal, horizon = 30))]
    fn predict(&self, history: Vec<Vec<f64>>, goal: (f64, f64), horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        let ctx = context(&history, goal)?;
        let out = edn::predict(&self.params, &ctx, horizon).map_err(value_err)?;
        Ok(to_rows(&out.positions))
    }
}

/// Online filter over one layer of a private copy of the predictor.
#[pyclass(module = "trajadapt_py")]
struct Adapter {
    cfg: AdaptConfig,
    state: AdaptState,
}

#[pymethods]
impl Adapter {
    #[new]
    #[pyo3(signature = (predictor, layer = "fc3", tau = 3, sigma_q = 1e-6, sigma_r = 1e-2, forgetting = 0.99, p0 = 1e-2))]
    fn new(
        predictor: &Predictor,
        layer: &str,
        tau: usize,
        sigma_q: f64,
        sigma_r: f64,
        forgetting: f64,
        p0: f64,
    ) -> PyResult<Self> {
        let cfg = AdaptConfig {
            layer: layer_from(layer)?,
            tau,
            sigma_q,
            sigma_r,
            lambda: forgetting,
            p0,
            ..AdaptConfig::default()
        };
        let state = AdaptState::new(&predictor.params, &cfg).map_err(value_err)?;
        Ok(Self { cfg, state })
    }

    /// Records the current instant and returns the adapted model's prediction for it.
    #[pyo3(signature = (history, goal, horizon = 30))]
    fn push(&mut self, history: Vec<Vec<f64>>, goal: (f64, f64), horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        let ctx = context(&history, goal)?;
        let pred = edn::predict(&self.state.model, &ctx, horizon.max(self.cfg.tau)).map_err(value_err)?;
        self.state.push(ctx, &pred.positions);
        let rows = to_rows(&pred.positions);
        Ok(rows.into_iter().take(horizon).collect())
    }

    #[getter]
    fn ready(&self) -> bool {
        self.state.ready()
    }

    /// Corrects the layer with the `τ` positions observed after the oldest
    /// buffered instant, in that instant's ego frame.
    fn adapt<'py>(&mut self, py: Python<'py>, observed: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let obs = to_mat(&observed)?;
        let rec = self.state.adapt(&self.cfg, &obs).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("residual_norm", rec.residual_norm_pre)?;
        d.set_item("gain_norm", rec.gain_norm)?;
        d.set_item("skipped", rec.skipped)?;
        Ok(d)
    }

    #[pyo3(signature = (history, goal, horizon = 30))]
    fn predict(&self, history: Vec<Vec<f64>>, goal: (f64, f64), horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        let ctx = context(&history, goal)?;
        let out = edn::predict(&self.state.model, &ctx, horizon).map_err(value_err)?;
        Ok(to_rows(&out.positions))
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.state.theta().to_vec()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.state.steps
    }

    fn predictor(&self) -> Predictor {
        Predictor {
            params: self.state.model.clone(),
        }
    }
}

/// Mean Euclidean distance between two equally long `K × 2` sequences.
#[pyfunction]
fn ade(pred: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ade(&to_mat(&pred)?, &to_mat(&truth)?).map_err(value_err)
}

#[pyfunction]
fn window_count(length: usize, t_h: usize, t_f: usize) -> usize {
    dataio::window_count(length, t_h, t_f)
}

/// Synthesizes a scenario ("intersection" or "roundabout") and writes it as
/// an INTERACTION-style CSV. Returns the number of frames written.
#[pyfunction]
#[pyo3(signature = (scenario, n_agents, seed, path))]
fn synthesize(scenario: &str, n_agents: usize, seed: u64, path: PathBuf) -> PyResult<usize> {
    let spec = match scenario {
        "intersection" => ScenarioSpec::intersection(n_agents, seed),
        "roundabout" => ScenarioSpec::roundabout(n_agents, seed),
        other => return Err(value_err(format!("unknown scenario '{other}'"))),
    };
    let trajs = dataio::synthesize(&spec).map_err(value_err)?;
    dataio::write_csv(&path, &trajs).map_err(value_err)?;
    Ok(trajs.iter().map(|t| t.frames.len()).sum())
}

/// Reads a track CSV into a list of dicts with `case_id`, `agent_id` and
/// `frames` rows `(frame_id, timestamp_ms, x, y, vx, vy, psi)`.
#[pyfunction]
fn load_csv<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let trajs = dataio::load_csv(&path).map_err(value_err)?;
    trajs
        .iter()
        .map(|t| {
            let d = PyDict::new(py);
            d.set_item("case_id", t.case_id)?;
            d.set_item("agent_id", t.agent_id)?;
            let frames: Vec<(i64, i64, f64, f64, f64, f64, f64)> = t
                .frames
                .iter()
                .map(|f| (f.frame_id, f.timestamp_ms, f.x, f.y, f.vx, f.vy, f.psi))
                .collect();
            d.set_item("frames", frames)?;
            Ok(d)
        })
        .collect()
}

/// Runs one pipeline command and returns its JSON summary.
#[pyfunction]
#[pyo3(signature = (command, out, config = None, overrides = Vec::new()))]
fn run(command: &str, out: PathBuf, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    let mut cfg = RunConfig::load(config.as_deref(), &overrides).map_err(value_err)?;
    cfg.out_dir = out;
    let json = match command {
        "gen-data" => serde_json::to_string(&runner::cmd_gen_data(&cfg).map_err(value_err)?),
        "train" => {
            let t = runner::cmd_train(&cfg).map_err(value_err)?;
            serde_json::to_string(&serde_json::json!({
                "n_train": t.n_train,
                "n_val": t.n_val,
                "best_epoch": t.best_epoch,
                "curve": t.curve,
            }))
        }
        "eval" => serde_json::to_string(&runner::cmd_eval(&cfg).map_err(value_err)?),
        "sweep" => serde_json::to_string(&runner::cmd_sweep(&cfg).map_err(value_err)?),
        other => return Err(value_err(format!("unknown command '{other}'"))),
    };
    json.map_err(value_err)
}

#[pymodule]
fn trajadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Predictor>()?;
    m.add_class::<Adapter>()?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
