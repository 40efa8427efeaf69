//! Online per-agent adaptation of one weight matrix with a multi-step
//! extended Kalman filter and forgetting factor.
//!
//! The filter treats the flattened weights of the selected layer as the state.
//! At instant `t` the context recorded `τ` instants earlier is replayed with the
//! current estimate, compared against the `τ` positions observed since, and the
//! estimate is corrected along the linearized measurement.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Sample;
use crate::edn::{self, EdnError, EdnParams, PredictionContext, OUTPUT_DIM};
use crate::metrics::{self, AdeReport, MetricError, ReportInputs};
use crate::nn::LayerId;
use crate::numkit::{self, Mat, NumError};

pub const DEFAULT_MAX_PARAMS: usize = 4096;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("layer {layer} has {size} parameters, above the cap of {cap}; set allow_large_layer to proceed")]
    LayerTooLarge {
        layer: LayerId,
        size: usize,
        cap: usize,
    },
    #[error("adaptation needs {need} buffered contexts, have {have}")]
    NotReady { have: usize, need: usize },
    #[error("observed window must be at least {tau} x 2, got {rows} x {cols}")]
    ObservedShape { tau: usize, rows: usize, cols: usize },
    #[error("case samples must be consecutive frames; anchor jumps at index {index}")]
    NonConsecutive { index: usize },
    #[error("baseline predictions: expected {expected}, got {got}")]
    BaselineCount { expected: usize, got: usize },
    #[error(transparent)]
    Edn(#[from] EdnError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How the covariance absorbs process noise and the forgetting factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceUpdate {
    /// `P ← λ⁻¹ (P − K H P + Q)`.
    #[default]
    Scaled,
    /// `P ← λ⁻¹ (P − K H P) + Q`.
    Additive,
}

/// Where the predicted measurement in the residual comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// Replay the buffered context with the current estimate.
    #[default]
    Recompute,
    /// Use the prediction made when the context was buffered.
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub layer: LayerId,
    pub tau: usize,
    pub sigma_q: f64,
    pub sigma_r: f64,
    pub lambda: f64,
    pub p0: f64,
    pub covariance_update: CovarianceUpdate,
    pub residual_source: ResidualSource,
    pub persist_across_cases: bool,
    pub max_params: usize,
    pub allow_large_layer: bool,
    /// When false the model stays frozen and every improvement is zero.
    pub enabled: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            layer: LayerId::Fc3,
            tau: 3,
            sigma_q: 1e-6,
            sigma_r: 1e-2,
            lambda: 0.99,
            p0: 1e-2,
            covariance_update: CovarianceUpdate::Scaled,
            residual_source: ResidualSource::Recompute,
            persist_across_cases: false,
            max_params: DEFAULT_MAX_PARAMS,
            allow_large_layer: false,
            enabled: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |msg: String| Err(AdaptError::Config(msg));
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if !(self.sigma_q.is_finite() && self.sigma_q >= 0.0) {
            return bad(format!("sigma_q must be finite and >= 0, got {}", self.sigma_q));
        }
        if !(self.sigma_r.is_finite() && self.sigma_r > 0.0) {
            return bad(format!("sigma_r must be finite and > 0, got {}", self.sigma_r));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.p0.is_finite() && self.p0 > 0.0) {
            return bad(format!("p0 must be finite and > 0, got {}", self.p0));
        }
        Ok(())
    }
}

/// Output of one filter correction.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterUpdate {
    /// `d × m` Kalman gain.
    pub gain: Mat,
    pub covariance: Mat,
    /// `K · residual`, to be added to the estimate.
    pub delta: Vec<f64>,
}

/// One correction of the filter for a linearized measurement `h` (`m × d`)
/// and residual `observed − predicted` (length `m`).
pub fn filter_update(
    p: &Mat,
    h: &Mat,
    residual: &[f64],
    cfg: &AdaptConfig,
) -> Result<FilterUpdate, NumError> {
    let mut covariance = p.clone();
    let (gain_t, delta) = filter_update_in_place(&mut covariance, h, residual, cfg)?;
    Ok(FilterUpdate {
        gain: gain_t.transpose(),
        covariance,
        delta,
    })
}

/// As [`filter_update`], overwriting `p` with the new covariance. Returns the
/// transposed gain (`m × d`) and the correction. On error `p` is untouched.
pub fn filter_update_in_place(
    p: &mut Mat,
    h: &Mat,
    residual: &[f64],
    cfg: &AdaptConfig,
) -> Result<(Mat, Vec<f64>), NumError> {
    let (m, d) = h.shape();
    if p.shape() != (d, d) || residual.len() != m {
        return Err(NumError::Dimension {
            op: "filter_update",
            lhs: p.shape(),
            rhs: (m, residual.len()),
        });
    }
    // H P is the transpose of P Hᵀ because P is symmetric.
    let hp = numkit::matmul(h, p)?;
    let mut s = numkit::matmul_nt(&hp, h)?;
    s.add_diag(cfg.sigma_r);
    let s = numkit::symmetrize(&s)?;
    let gain_t = numkit::spd_solve(&s, &hp)?;

    let inv_lambda = 1.0 / cfg.lambda;
    let (diag_in, diag_out) = match cfg.covariance_update {
        CovarianceUpdate::Scaled => (cfg.sigma_q, 0.0),
        CovarianceUpdate::Additive => (0.0, cfg.sigma_q),
    };
    // P − K H P = P − (gain_t)ᵀ (H P); only the upper triangle is computed,
    // then mirrored, so the result is exactly symmetric.
    let mut acc = vec![0.0; d];
    let mut g = vec![0.0; m];
    for i in 0..d {
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = gain_t[(k, i)];
        }
        let acc = &mut acc[i..];
        acc.fill(0.0);
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            for (a, &b) in acc.iter_mut().zip(&hp.row(k)[i..]) {
                *a += gk * b;
            }
        }
        let row = &mut p.row_mut(i)[i..];
        for (x, a) in row.iter_mut().zip(acc.iter()) {
            *x = (*x - a) * inv_lambda;
        }
        row[0] += (diag_in * inv_lambda) + diag_out;
    }
    for i in 0..d {
        for j in 0..i {
            let v = p[(j, i)];
            p.row_mut(i)[j] = v;
        }
    }

    let mut delta = vec![0.0; d];
    for (r, gain_row) in residual.iter().zip((0..m).map(|k| gain_t.row(k))) {
        for (x, g) in delta.iter_mut().zip(gain_row) {
            *x += g * r;
        }
    }
    Ok((gain_t, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRecord {
    /// `observed − predicted`, interleaved `(x, y)` per step.
    pub residual: Vec<f64>,
    pub gain_norm: f64,
    pub residual_norm_pre: f64,
    /// Residual norm of the same window replayed after the update; filled in
    /// by [`run_online`].
    pub residual_norm_post: Option<f64>,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
struct Buffered {
    ctx: PredictionContext,
    /// First `τ` rows of the prediction made when the context was pushed.
    cached: Mat,
}

/// Filter state for one agent: the working model (whose selected layer is
/// the estimate), its covariance and the delay line of recent contexts.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub layer: LayerId,
    pub tau: usize,
    pub model: EdnParams,
    pub covariance: Mat,
    pub steps: usize,
    pub warnings: Vec<String>,
    buffer: VecDeque<Buffered>,
}

impl AdaptState {
    pub fn new(model: &EdnParams, cfg: &AdaptConfig) -> Result<Self, AdaptError> {
        cfg.validate()?;
        let d = model.layer_len(cfg.layer);
        if d > cfg.max_params && !cfg.allow_large_layer {
            return Err(AdaptError::LayerTooLarge {
                layer: cfg.layer,
                size: d,
                cap: cfg.max_params,
            });
        }
        let mut covariance = Mat::zeros(d, d);
        covariance.add_diag(cfg.p0);
        Ok(Self {
            layer: cfg.layer,
            tau: cfg.tau,
            model: model.clone(),
            covariance,
            steps: 0,
            warnings: Vec::new(),
            buffer: VecDeque::with_capacity(cfg.tau + 1),
        })
    }

    pub fn theta(&self) -> &[f64] {
        self.model.layer(self.layer).as_slice()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() == self.tau
    }

    pub fn clear_buffer(&mut self) {
        self.buffer.clear();
    }

    /// Appends the context of the current instant, evicting anything older
    /// than `τ` instants.
    pub fn push(&mut self, ctx: PredictionContext, prediction: &Mat) {
        let rows = self.tau.min(prediction.rows());
        let cached = Mat::from_fn(rows, OUTPUT_DIM, |k, j| prediction[(k, j)]);
        self.buffer.push_back(Buffered { ctx, cached });
        while self.buffer.len() > self.tau {
            self.buffer.pop_front();
        }
    }

    /// Corrects the estimate with the positions observed over the `τ` steps
    /// following the oldest buffered context (`observed` in that context's ego
    /// frame, at least `τ × 2`). The context stays buffered until the next
    /// [`push`](Self::push).
    pub fn adapt(
        &mut self,
        cfg: &AdaptConfig,
        observed: &Mat,
    ) -> Result<InnovationRecord, AdaptError> {
        let tau = self.tau;
        if !self.ready() {
            return Err(AdaptError::NotReady {
                have: self.buffer.len(),
                need: tau,
            });
        }
        if observed.rows() < tau || observed.cols() < OUTPUT_DIM {
            return Err(AdaptError::ObservedShape {
                tau,
                rows: observed.rows(),
                cols: observed.cols(),
            });
        }
        let front = &self.buffer[0];
        let trace = edn::trace_for_jacobian(&self.model, &front.ctx, tau, tau)?;
        let predicted = match cfg.residual_source {
            ResidualSource::Recompute => trace.outputs(),
            ResidualSource::Cached => &front.cached,
        };
        let mut residual = Vec::with_capacity(OUTPUT_DIM * tau);
        for k in 0..tau {
            for j in 0..OUTPUT_DIM {
                residual.push(observed[(k, j)] - predicted[(k, j)]);
            }
        }
        let residual_norm_pre = numkit::norm(&residual);
        let h = edn::jacobian_from_trace(&self.model, self.layer, &trace, tau)?;
        match filter_update_in_place(&mut self.covariance, &h, &residual, cfg) {
            Ok((gain_t, delta)) => {
                let mut theta = self.theta().to_vec();
                for (t, d) in theta.iter_mut().zip(&delta) {
                    *t += d;
                }
                self.model.set_layer(self.layer, &theta)?;
                self.steps += 1;
                Ok(InnovationRecord {
                    residual,
                    gain_norm: gain_t.frobenius_norm(),
                    residual_norm_pre,
                    residual_norm_post: None,
                    skipped: false,
                })
            }
            Err(e @ NumError::NotSymmetric { .. }) | Err(e @ NumError::Singular { .. }) => {
                let msg = format!("adaptation step skipped: {e}");
                log::warn!("{msg}");
                self.warnings.push(msg);
                Ok(InnovationRecord {
                    residual,
                    gain_norm: 0.0,
                    residual_norm_pre,
                    residual_norm_post: None,
                    skipped: true,
                })
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    /// Index of the instant within the case.
    pub t: usize,
    pub anchor: usize,
    pub innovation: Option<InnovationRecord>,
    pub report: Option<AdeReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OnlineRun {
    pub steps: Vec<OnlineStep>,
    pub notice: Option<String>,
    /// Skipped-update warnings raised during this case.
    pub warnings: Vec<String>,
}

/// Frozen-model predictions (`horizon × 2`, ego frame) for every sample.
pub fn baseline_predictions(
    model: &EdnParams,
    case: &[Sample],
    horizon: usize,
) -> Result<Vec<Mat>, EdnError> {
    case.iter()
        .map(|s| edn::predict(model, &s.context(), horizon).map(|p| p.positions))
        .collect()
}

fn to_world(s: &Sample, ego: &Mat) -> Mat {
    let mut out = ego.clone();
    for k in 0..out.rows() {
        let w = s.frame.to_world([ego[(k, 0)], ego[(k, 1)]]);
        out.row_mut(k).copy_from_slice(&w);
    }
    out
}

/// Replays one case instant by instant from a fresh filter state.
pub fn run_online(
    model: &EdnParams,
    cfg: &AdaptConfig,
    case: &[Sample],
    horizon: usize,
    baseline: Option<&[Mat]>,
) -> Result<OnlineRun, AdaptError> {
    let mut state = AdaptState::new(model, cfg)?;
    run_online_with(&mut state, model, cfg, case, horizon, baseline)
}

/// As [`run_online`] but continuing from `state`, whose estimate and
/// covariance carry over; its buffer is cleared first. `model` is the frozen
/// offline model the baseline is measured with.
pub fn run_online_with(
    state: &mut AdaptState,
    model: &EdnParams,
    cfg: &AdaptConfig,
    case: &[Sample],
    horizon: usize,
    baseline: Option<&[Mat]>,
) -> Result<OnlineRun, AdaptError> {
    let tau = cfg.tau;
    if tau > horizon {
        return Err(AdaptError::Config(format!(
            "tau {tau} exceeds the prediction horizon {horizon}"
        )));
    }
    if let Some(i) = (1..case.len()).find(|&i| case[i].anchor != case[i - 1].anchor + 1) {
        return Err(AdaptError::NonConsecutive { index: i });
    }
    if case.len() < tau + 1 {
        return Ok(OnlineRun {
            steps: Vec::new(),
            notice: Some(format!(
                "case has {} instants, fewer than tau + 1 = {}",
                case.len(),
                tau + 1
            )),
            warnings: Vec::new(),
        });
    }
    let computed;
    let baseline = match baseline {
        Some(b) if b.len() != case.len() => {
            return Err(AdaptError::BaselineCount {
                expected: case.len(),
                got: b.len(),
            })
        }
        Some(b) => b,
        None => {
            computed = baseline_predictions(model, case, horizon)?;
            &computed
        }
    };
    state.clear_buffer();

    let mut steps = Vec::with_capacity(case.len());
    for (i, sample) in case.iter().enumerate() {
        let ctx = sample.context();
        let mut innovation = None;
        if cfg.enabled && state.ready() {
            innovation = Some(state.adapt(cfg, &case[i - tau].future)?);
        }
        let adapted_now = if cfg.enabled {
            edn::predict(&state.model, &ctx, horizon)?.positions
        } else {
            baseline[i].clone()
        };
        let mut report = None;
        if i >= tau {
            let prev = &case[i - tau];
            let adapted_prev = if cfg.enabled {
                edn::predict(&state.model, &prev.context(), horizon)?.positions
            } else {
                baseline[i - tau].clone()
            };
            if let Some(rec) = innovation.as_mut() {
                let post: Vec<f64> = (0..tau)
                    .flat_map(|k| {
                        (0..OUTPUT_DIM).map(move |j| (k, j))
                    })
                    .map(|(k, j)| prev.future[(k, j)] - adapted_prev[(k, j)])
                    .collect();
                rec.residual_norm_post = Some(numkit::norm(&post));
            }
            let truth_prev = prev.future_world();
            let truth_now = sample.future_world();
            let inputs = ReportInputs {
                baseline_prev: &to_world(prev, &baseline[i - tau]),
                adapted_prev: &to_world(prev, &adapted_prev),
                truth_prev: &truth_prev,
                baseline_now: &to_world(sample, &baseline[i]),
                adapted_now: &to_world(sample, &adapted_now),
                truth_now: &truth_now,
            };
            report = Some(metrics::report_at(i, &inputs, tau, horizon)?);
        }
        state.push(ctx, &adapted_now);
        steps.push(OnlineStep {
            t: i,
            anchor: sample.anchor,
            innovation,
            report,
        });
    }
    Ok(OnlineRun {
        steps,
        notice: None,
        warnings: std::mem::take(&mut state.warnings),
    })
}

#[derive(Debug, Serialize)]
struct LogRow {
    case_id: u64,
    agent_id: u64,
    t: usize,
    anchor: usize,
    residual_norm_pre: Option<f64>,
    residual_norm_post: Option<f64>,
    gain_norm: Option<f64>,
    skipped: Option<bool>,
    ade1_baseline: Option<f64>,
    ade1_adapted: Option<f64>,
    ade2_baseline: Option<f64>,
    ade2_adapted: Option<f64>,
    ade3_baseline: Option<f64>,
    ade3_adapted: Option<f64>,
    ade4_baseline: Option<f64>,
    ade4_adapted: Option<f64>,
}

/// Per-instant adaptation log, one row per instant of every case. `header`
/// lines are written first, each prefixed with `# `.
pub fn write_adapt_log(
    path: &Path,
    header: &[String],
    runs: &[((u64, u64), OnlineRun)],
) -> Result<(), AdaptError> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for ((case_id, agent_id), run) in runs {
        for step in &run.steps {
            let inn = step.innovation.as_ref();
            let ade = |m: usize, adapted: bool| {
                step.report.map(|r| {
                    if adapted {
                        r.ade[m].adapted
                    } else {
                        r.ade[m].baseline
                    }
                })
            };
            w.serialize(LogRow {
                case_id: *case_id,
                agent_id: *agent_id,
                t: step.t,
                anchor: step.anchor,
                residual_norm_pre: inn.map(|r| r.residual_norm_pre),
                residual_norm_post: inn.and_then(|r| r.residual_norm_post),
                gain_norm: inn.map(|r| r.gain_norm),
                skipped: inn.map(|r| r.skipped),
                ade1_baseline: ade(0, false),
                ade1_adapted: ade(0, true),
                ade2_baseline: ade(1, false),
                ade2_adapted: ade(1, true),
                ade3_baseline: ade(2, false),
                ade3_adapted: ade(2, true),
                ade4_baseline: ade(3, false),
                ade4_adapted: ade(3, true),
            })
            .map_err(std::io::Error::other)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize, window, DriverParams, ScenarioSpec, ScenarioTag};
    use crate::goalgen::GoalProvider;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_cfg() -> AdaptConfig {
        AdaptConfig {
            sigma_q: 0.0,
            sigma_r: 1.0,
            lambda: 1.0,
            p0: 1.0,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn scalar_update_by_hand() {
        let up = filter_update(&Mat::identity(1), &Mat::identity(1), &[1.0], &scalar_cfg()).unwrap();
        assert!((up.gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((up.delta[0] - 0.5).abs() < 1e-15);
        assert!((up.covariance[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_modes_differ_only_in_noise_placement() {
        let base = AdaptConfig {
            sigma_q: 0.1,
            lambda: 0.5,
            ..scalar_cfg()
        };
        let p = Mat::identity(1);
        let h = Mat::identity(1);
        let scaled = filter_update(&p, &h, &[0.0], &base).unwrap();
        assert!((scaled.covariance[(0, 0)] - 1.2).abs() < 1e-15);
        let additive = AdaptConfig {
            covariance_update: CovarianceUpdate::Additive,
            ..base
        };
        let add = filter_update(&p, &h, &[0.0], &additive).unwrap();
        assert!((add.covariance[(0, 0)] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn fused_update_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 9;
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let mut p = numkit::matmul_nt(&a, &a).unwrap();
        p.add_diag(0.1);
        let h = Mat::from_fn(4, d, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for mode in [CovarianceUpdate::Scaled, CovarianceUpdate::Additive] {
            let cfg = AdaptConfig {
                sigma_q: 0.03,
                lambda: 0.9,
                covariance_update: mode,
                ..AdaptConfig::default()
            };
            let up = filter_update(&p, &h, &r, &cfg).unwrap();
            // K = P Hᵀ (H P Hᵀ + R)⁻¹ via an explicit inverse of the small S.
            let pht = numkit::matmul_nt(&p, &h).unwrap();
            let mut s = numkit::matmul(&h, &pht).unwrap();
            s.add_diag(cfg.sigma_r);
            let s_inv = numkit::spd_solve(&numkit::symmetrize(&s).unwrap(), &Mat::identity(4)).unwrap();
            let k = numkit::matmul(&pht, &s_inv).unwrap();
            let khp = numkit::matmul(&k, &numkit::matmul(&h, &p).unwrap()).unwrap();
            let mut expected = p.sub(&khp).unwrap();
            match mode {
                CovarianceUpdate::Scaled => {
                    expected.add_diag(cfg.sigma_q);
                    expected = expected.scale(1.0 / cfg.lambda);
                }
                CovarianceUpdate::Additive => {
                    expected = expected.scale(1.0 / cfg.lambda);
                    expected.add_diag(cfg.sigma_q);
                }
            }
            assert!(up.covariance.max_abs_diff(&expected).unwrap() < 1e-12);
            assert!(up.gain.max_abs_diff(&k).unwrap() < 1e-12);
            let delta = numkit::matvec(&k, &r).unwrap();
            for (x, y) in up.delta.iter().zip(&delta) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_leaves_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Mat::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let p = Mat::identity(6).scale(0.01);
        let up = filter_update(&p, &h, &[0.0; 4], &AdaptConfig::default()).unwrap();
        assert!(up.delta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn large_measurement_noise_freezes_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Mat::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let cfg = AdaptConfig {
            sigma_r: 1e12,
            ..AdaptConfig::default()
        };
        let up = filter_update(&Mat::identity(6).scale(0.01), &h, &[1.0; 4], &cfg).unwrap();
        assert!(up.gain.frobenius_norm() <= 1e-9);
    }

    #[test]
    fn config_validation() {
        for bad in [
            AdaptConfig { tau: 0, ..Default::default() },
            AdaptConfig { lambda: 0.0, ..Default::default() },
            AdaptConfig { lambda: 1.5, ..Default::default() },
            AdaptConfig { sigma_r: 0.0, ..Default::default() },
            AdaptConfig { sigma_q: -1.0, ..Default::default() },
            AdaptConfig { p0: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(AdaptError::Config(_))));
        }
        AdaptConfig::default().validate().unwrap();
    }

    #[test]
    fn oversized_layer_needs_override() {
        let model = EdnParams::init(8, 0);
        let cfg = AdaptConfig {
            layer: LayerId::Fc1,
            max_params: 10,
            ..Default::default()
        };
        assert!(matches!(
            AdaptState::new(&model, &cfg),
            Err(AdaptError::LayerTooLarge { size: 64, .. })
        ));
        AdaptState::new(
            &model,
            &AdaptConfig {
                allow_large_layer: true,
                ..cfg
            },
        )
        .unwrap();
    }

    fn case(seed: u64, frames: usize) -> Vec<Sample> {
        let spec = ScenarioSpec {
            frames,
            ..ScenarioSpec::intersection(1, seed)
        };
        let mut samples = window(&synthesize(&spec).unwrap(), 10, 30, 1, ScenarioTag::Trained);
        GoalProvider::ConstVelocity.fill(&mut samples, 30).unwrap();
        samples
    }

    #[test]
    fn first_adaptation_waits_for_tau_instants() {
        let model = EdnParams::init(8, 1);
        let cfg = AdaptConfig {
            tau: 3,
            ..Default::default()
        };
        let run = run_online(&model, &cfg, &case(1, 50), 30, None).unwrap();
        let first = run.steps.iter().position(|s| s.innovation.is_some()).unwrap();
        assert_eq!(first, 3);
        assert!(run.steps[..3].iter().all(|s| s.report.is_none()));
        assert!(run.steps[3..].iter().all(|s| s.report.is_some() && s.innovation.is_some()));
    }

    #[test]
    fn short_case_yields_notice() {
        let model = EdnParams::init(8, 1);
        let samples = case(1, 50);
        let cfg = AdaptConfig {
            tau: 5,
            ..Default::default()
        };
        let run = run_online(&model, &cfg, &samples[..5], 30, None).unwrap();
        assert!(run.steps.is_empty() && run.notice.is_some());
        assert!(matches!(
            run_online(&model, &cfg, &[samples[0].clone(), samples[2].clone()], 30, None),
            Err(AdaptError::NonConsecutive { index: 1 })
        ));
    }

    #[test]
    fn disabled_adaptation_gives_zero_improvement() {
        let model = EdnParams::init(8, 2);
        let cfg = AdaptConfig {
            enabled: false,
            ..Default::default()
        };
        let run = run_online(&model, &cfg, &case(2, 50), 30, None).unwrap();
        for s in &run.steps {
            if let Some(r) = s.report {
                assert!(r.improvement.iter().all(|i| *i == Some(0.0)));
            }
        }
    }

    #[test]
    fn huge_measurement_noise_barely_moves_predictions() {
        let model = EdnParams::init(8, 3);
        let cfg = AdaptConfig {
            sigma_r: 1e12,
            ..Default::default()
        };
        let run = run_online(&model, &cfg, &case(3, 50), 30, None).unwrap();
        for s in run.steps.iter().filter_map(|s| s.report) {
            for i in s.improvement.iter().flatten() {
                assert!(i.abs() < 1e-6, "improvement {i}");
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let model = EdnParams::init(8, 4);
        let cfg = AdaptConfig::default();
        let c = case(4, 60);
        let a = run_online(&model, &cfg, &c, 30, None).unwrap();
        let b = run_online(&model, &cfg, &c, 30, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cached_baselines_match_recomputed() {
        let model = EdnParams::init(8, 5);
        let cfg = AdaptConfig::default();
        let c = case(5, 50);
        let base = baseline_predictions(&model, &c, 30).unwrap();
        assert_eq!(
            run_online(&model, &cfg, &c, 30, Some(&base)).unwrap(),
            run_online(&model, &cfg, &c, 30, None).unwrap()
        );
    }

    #[test]
    fn learns_a_constant_offset() {
        // A model whose output layer is zero predicts standing still; a
        // straight-driving agent gives a residual the output bias can't
        // absorb, but the weights on a nonzero penultimate activation can.
        let mut model = EdnParams::init(8, 6);
        model.fc3.w = Mat::zeros(2, 8);
        let spec = ScenarioSpec {
            frames: 60,
            drivers: Some(vec![DriverParams::straight(5.0)]),
            ..ScenarioSpec::intersection(1, 0)
        };
        let mut c = window(&synthesize(&spec).unwrap(), 10, 30, 1, ScenarioTag::Trained);
        GoalProvider::ConstVelocity.fill(&mut c, 30).unwrap();
        let cfg = AdaptConfig {
            tau: 3,
            p0: 1.0,
            ..Default::default()
        };
        let run = run_online(&model, &cfg, &c, 30, None).unwrap();
        let (mut base, mut adapted) = (0.0, 0.0);
        for r in run.steps.iter().filter_map(|s| s.report) {
            base += r.ade[0].baseline;
            adapted += r.ade[0].adapted;
        }
        assert!(adapted < base, "adapted {adapted} vs baseline {base}");
    }

    #[test]
    fn persisted_state_carries_over() {
        let model = EdnParams::init(8, 7);
        let cfg = AdaptConfig::default();
        let c = case(7, 50);
        let mut state = AdaptState::new(&model, &cfg).unwrap();
        run_online_with(&mut state, &model, &cfg, &c, 30, None).unwrap();
        let after_one = state.theta().to_vec();
        assert_ne!(after_one, model.flatten_layer(cfg.layer));
        let fresh = run_online(&model, &cfg, &c, 30, None).unwrap();
        let carried = run_online_with(&mut state, &model, &cfg, &c, 30, None).unwrap();
        assert_ne!(fresh, carried);
    }

    #[test]
    fn adapt_log_has_one_row_per_instant() {
        let model = EdnParams::init(8, 8);
        let c = case(8, 50);
        let run = run_online(&model, &AdaptConfig::default(), &c, 30, None).unwrap();
        let n = run.steps.len();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_adapt_log(&path, &["seed=1".into()], &[((1, 1), run)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=1\ncase_id,"));
        assert_eq!(text.lines().count(), n + 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn covariance_stays_symmetric(seed in any::<u64>(), m in 1usize..6, d in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = Mat::identity(d).scale(0.01);
                for _ in 0..20 {
                    let h = Mat::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0));
                    let r: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                    p = filter_update(&p, &h, &r, &AdaptConfig::default()).unwrap().covariance;
                    prop_assert!(p.is_finite());
                    for i in 0..d {
                        for j in 0..d {
                            prop_assert_eq!(p[(i, j)], p[(j, i)]);
                        }
                    }
                }
            }

            #[test]
            fn gain_shrinks_with_measurement_noise(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = Mat::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
                let p = Mat::identity(5).scale(0.05);
                let gain = |sigma_r: f64| {
                    let cfg = AdaptConfig { sigma_r, ..AdaptConfig::default() };
                    filter_update(&p, &h, &[0.0, 0.0], &cfg).unwrap().gain.frobenius_norm()
                };
                prop_assert!(gain(1.0) <= gain(1e-2) + 1e-15);
            }
        }
    }
}
