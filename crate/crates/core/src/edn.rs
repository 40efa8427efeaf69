//! GRU encoder-decoder trajectory predictor.
//!
//! The encoder folds `T_h` ego-frame states `(x, y, vx, vy)` into a context
//! vector. The decoder starts from that context, feeds `[ŷ_{k-1}; g]` at each
//! step (with `ŷ_0` the ego origin) and maps its hidden state through three
//! dense layers (tanh, tanh, linear) to the next position. All features and
//! outputs are divided by `position_scale` inside the network so that the
//! recurrent inputs stay in the unsaturated range of the gates.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Sample;
use crate::geom::EgoFrame;
use crate::nn::{
    clip_global_norm, dense_backward, dense_forward_cached, gru_backward, gru_forward, Activation,
    AdamState, DenseCache, DenseParams, GruCache, GruCellParams, LayerId, NnError,
};
use crate::numkit::Mat;

pub const STATE_DIM: usize = 4;
pub const OUTPUT_DIM: usize = 2;
pub const GOAL_DIM: usize = 2;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

const FC_ACTIVATIONS: [Activation; 3] = [Activation::Tanh, Activation::Tanh, Activation::Linear];

#[derive(Debug, Error)]
pub enum EdnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("history must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    HistoryShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("tau {tau} outside 1..={max}")]
    TauOutOfRange { tau: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdnParams {
    pub encoder: GruCellParams,
    pub decoder: GruCellParams,
    pub fc1: DenseParams,
    pub fc2: DenseParams,
    pub fc3: DenseParams,
    pub input_dim: usize,
    pub goal_dim: usize,
    pub hidden: usize,
    pub position_scale: f64,
}

impl EdnParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            encoder: GruCellParams::zeros(STATE_DIM, hidden),
            decoder: GruCellParams::zeros(OUTPUT_DIM + GOAL_DIM, hidden),
            fc1: DenseParams::zeros(hidden, hidden),
            fc2: DenseParams::zeros(hidden, hidden),
            fc3: DenseParams::zeros(hidden, OUTPUT_DIM),
            input_dim: STATE_DIM,
            goal_dim: GOAL_DIM,
            hidden,
            position_scale: 10.0,
        }
    }

    /// Seeded initialization: weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: GruCellParams::init(STATE_DIM, hidden, &mut rng),
            decoder: GruCellParams::init(OUTPUT_DIM + GOAL_DIM, hidden, &mut rng),
            fc1: DenseParams::init(hidden, hidden, &mut rng),
            fc2: DenseParams::init(hidden, hidden, &mut rng),
            fc3: DenseParams::init(hidden, OUTPUT_DIM, &mut rng),
            ..Self::zeros(hidden)
        }
    }

    pub fn with_position_scale(mut self, scale: f64) -> Self {
        self.position_scale = scale;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            position_scale: self.position_scale,
            ..Self::zeros(self.hidden)
        }
    }

    /// All fourteen tensors in a fixed order (encoder, decoder, fc1..fc3).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(14);
        out.extend(self.encoder.tensors());
        out.extend(self.decoder.tensors());
        out.extend(self.fc1.tensors());
        out.extend(self.fc2.tensors());
        out.extend(self.fc3.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(14);
        out.extend(self.encoder.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out.extend(self.fc1.tensors_mut());
        out.extend(self.fc2.tensors_mut());
        out.extend(self.fc3.tensors_mut());
        out
    }

    pub fn add_assign(&mut self, other: &EdnParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn layer(&self, layer: LayerId) -> &Mat {
        match layer {
            LayerId::EncIh => &self.encoder.w_ih,
            LayerId::EncHh => &self.encoder.w_hh,
            LayerId::DecIh => &self.decoder.w_ih,
            LayerId::DecHh => &self.decoder.w_hh,
            LayerId::Fc1 => &self.fc1.w,
            LayerId::Fc2 => &self.fc2.w,
            LayerId::Fc3 => &self.fc3.w,
        }
    }

    pub fn layer_mut(&mut self, layer: LayerId) -> &mut Mat {
        match layer {
            LayerId::EncIh => &mut self.encoder.w_ih,
            LayerId::EncHh => &mut self.encoder.w_hh,
            LayerId::DecIh => &mut self.decoder.w_ih,
            LayerId::DecHh => &mut self.decoder.w_hh,
            LayerId::Fc1 => &mut self.fc1.w,
            LayerId::Fc2 => &mut self.fc2.w,
            LayerId::Fc3 => &mut self.fc3.w,
        }
    }

    pub fn layer_len(&self, layer: LayerId) -> usize {
        self.layer(layer).as_slice().len()
    }

    /// Row-major flattening of the selected weight matrix.
    pub fn flatten_layer(&self, layer: LayerId) -> Vec<f64> {
        self.layer(layer).as_slice().to_vec()
    }

    pub fn set_layer(&mut self, layer: LayerId, values: &[f64]) -> Result<(), EdnError> {
        let target = self.layer_mut(layer).as_mut_slice();
        if target.len() != values.len() {
            return Err(NnError::Length {
                what: "layer values",
                expected: target.len(),
                got: values.len(),
            }
            .into());
        }
        target.copy_from_slice(values);
        Ok(())
    }
}

/// Everything the predictor needs at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionContext {
    /// `T_h × 4` ego-frame states, oldest first; the last row is `s_t`.
    pub history: Mat,
    pub goal: [f64; 2],
    pub frame: EgoFrame,
}

impl PredictionContext {
    pub fn current_state(&self) -> &[f64] {
        self.history.row(self.history.rows() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectory {
    /// `horizon × 2` ego-frame positions.
    pub positions: Mat,
}

impl PredictedTrajectory {
    pub fn horizon(&self) -> usize {
        self.positions.rows()
    }

    pub fn to_world(&self, frame: &EgoFrame) -> Mat {
        let mut out = self.positions.clone();
        for k in 0..out.rows() {
            let w = frame.to_world([out[(k, 0)], out[(k, 1)]]);
            out.row_mut(k).copy_from_slice(&w);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct DecoderStep {
    gru: GruCache,
    fc: [DenseCache; 3],
}

/// Forward tape of one prediction: every primitive's cache in execution order.
#[derive(Debug, Clone)]
pub struct EdnTrace {
    encoder: Vec<GruCache>,
    decoder: Vec<DecoderStep>,
    outputs: Mat,
}

/// Gradients with respect to the prediction's inputs.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub context: Vec<f64>,
    pub goal: [f64; 2],
    /// Only populated when backpropagating through the encoder.
    pub history: Option<Mat>,
}

impl EdnTrace {
    pub fn outputs(&self) -> &Mat {
        &self.outputs
    }

    pub fn horizon(&self) -> usize {
        self.decoder.len()
    }

    /// Reverse-mode pass for the scalar `Σ_k dy[k]·ŷ_k`. `dy` may cover fewer
    /// steps than were recorded. Parameter gradients accumulate into `grads`;
    /// the encoder is skipped unless `through_encoder`.
    pub fn backward(
        &self,
        p: &EdnParams,
        dy: &Mat,
        grads: &mut EdnParams,
        through_encoder: bool,
    ) -> Result<InputGrads, EdnError> {
        if dy.rows() > self.decoder.len() || dy.cols() != OUTPUT_DIM {
            return Err(NnError::Unrecorded {
                requested: dy.rows(),
                recorded: self.decoder.len(),
            }
            .into());
        }
        let scale = p.position_scale;
        let mut dh_next = vec![0.0; p.hidden];
        let mut dy_carry = [0.0; 2];
        let mut dgoal = [0.0; 2];
        for k in (0..dy.rows()).rev() {
            let step = &self.decoder[k];
            let dout = [
                (dy[(k, 0)] + dy_carry[0]) * scale,
                (dy[(k, 1)] + dy_carry[1]) * scale,
            ];
            let da2 = dense_backward(&p.fc3, &step.fc[2], &dout, Some(&mut grads.fc3));
            let da1 = dense_backward(&p.fc2, &step.fc[1], &da2, Some(&mut grads.fc2));
            let mut dh = dense_backward(&p.fc1, &step.fc[0], &da1, Some(&mut grads.fc1));
            for (a, b) in dh.iter_mut().zip(&dh_next) {
                *a += b;
            }
            let (dx, dh_prev) = gru_backward(&p.decoder, &step.gru, &dh, Some(&mut grads.decoder));
            // Step 0 consumes the constant ego origin; later steps consume ŷ_{k-1}.
            dy_carry = if k > 0 {
                [dx[0] / scale, dx[1] / scale]
            } else {
                [0.0; 2]
            };
            dgoal[0] += dx[2] / scale;
            dgoal[1] += dx[3] / scale;
            dh_next = dh_prev;
        }
        let context = dh_next.clone();
        let history = if through_encoder {
            let mut dhist = Mat::zeros(self.encoder.len(), STATE_DIM);
            let mut dh = dh_next;
            for (i, cache) in self.encoder.iter().enumerate().rev() {
                let (dx, dh_prev) = gru_backward(&p.encoder, cache, &dh, Some(&mut grads.encoder));
                for (d, v) in dhist.row_mut(i).iter_mut().zip(dx) {
                    *d = v / scale;
                }
                dh = dh_prev;
            }
            Some(dhist)
        } else {
            None
        };
        Ok(InputGrads {
            context,
            goal: dgoal,
            history,
        })
    }
}

fn check_history(p: &EdnParams, history: &Mat) -> Result<(), EdnError> {
    if history.cols() != p.input_dim || history.rows() == 0 {
        return Err(EdnError::HistoryShape {
            expected_rows: history.rows().max(1),
            expected_cols: p.input_dim,
            rows: history.rows(),
            cols: history.cols(),
        });
    }
    Ok(())
}

fn encode_traced(p: &EdnParams, history: &Mat) -> Result<Vec<GruCache>, EdnError> {
    check_history(p, history)?;
    let inv = 1.0 / p.position_scale;
    let mut h = vec![0.0; p.hidden];
    let mut caches = Vec::with_capacity(history.rows());
    for i in 0..history.rows() {
        let x: Vec<f64> = history.row(i).iter().map(|v| v * inv).collect();
        let cache = gru_forward(&p.encoder, &x, &h)?;
        h.clone_from(&cache.h);
        caches.push(cache);
    }
    Ok(caches)
}

/// Context vector: the encoder's final hidden state, starting from zeros.
pub fn encode(p: &EdnParams, history: &Mat) -> Result<Vec<f64>, EdnError> {
    Ok(encode_traced(p, history)?
        .pop()
        .map(|c| c.h)
        .unwrap_or_else(|| vec![0.0; p.hidden]))
}

fn decode_traced(
    p: &EdnParams,
    context: &[f64],
    goal: [f64; 2],
    horizon: usize,
) -> Result<(Vec<DecoderStep>, Mat), EdnError> {
    if horizon == 0 {
        return Err(EdnError::EmptyHorizon);
    }
    let scale = p.position_scale;
    let g = [goal[0] / scale, goal[1] / scale];
    let mut h = context.to_vec();
    let mut prev = [0.0; 2];
    let mut steps = Vec::with_capacity(horizon);
    let mut out = Mat::zeros(horizon, OUTPUT_DIM);
    for k in 0..horizon {
        let x = [prev[0] / scale, prev[1] / scale, g[0], g[1]];
        let gru = gru_forward(&p.decoder, &x, &h)?;
        let c1 = dense_forward_cached(&p.fc1, &gru.h, FC_ACTIVATIONS[0])?;
        let c2 = dense_forward_cached(&p.fc2, &c1.out, FC_ACTIVATIONS[1])?;
        let c3 = dense_forward_cached(&p.fc3, &c2.out, FC_ACTIVATIONS[2])?;
        prev = [c3.out[0] * scale, c3.out[1] * scale];
        out.row_mut(k).copy_from_slice(&prev);
        h.clone_from(&gru.h);
        steps.push(DecoderStep {
            gru,
            fc: [c1, c2, c3],
        });
    }
    Ok((steps, out))
}

pub fn decode(
    p: &EdnParams,
    context: &[f64],
    goal: [f64; 2],
    horizon: usize,
) -> Result<PredictedTrajectory, EdnError> {
    let (_, positions) = decode_traced(p, context, goal, horizon)?;
    Ok(PredictedTrajectory { positions })
}

pub fn predict(
    p: &EdnParams,
    ctx: &PredictionContext,
    horizon: usize,
) -> Result<PredictedTrajectory, EdnError> {
    let c = encode(p, &ctx.history)?;
    decode(p, &c, ctx.goal, horizon)
}

pub fn forward_trace(
    p: &EdnParams,
    ctx: &PredictionContext,
    horizon: usize,
) -> Result<EdnTrace, EdnError> {
    let encoder = encode_traced(p, &ctx.history)?;
    let context = encoder
        .last()
        .map(|c| c.h.clone())
        .unwrap_or_else(|| vec![0.0; p.hidden]);
    let (decoder, outputs) = decode_traced(p, &context, ctx.goal, horizon)?;
    Ok(EdnTrace {
        encoder,
        decoder,
        outputs,
    })
}

/// `∂ŷ_{1..τ} / ∂vec(W_layer)` as a `2τ × d` matrix; row `2k + j` is the
/// derivative of coordinate `j` of step `k + 1`.
pub fn jacobian_tau(
    p: &EdnParams,
    layer: LayerId,
    ctx: &PredictionContext,
    tau: usize,
    max_tau: usize,
) -> Result<Mat, EdnError> {
    let trace = trace_for_jacobian(p, ctx, tau, max_tau)?;
    jacobian_from_trace(p, layer, &trace, tau)
}

pub(crate) fn trace_for_jacobian(
    p: &EdnParams,
    ctx: &PredictionContext,
    tau: usize,
    max_tau: usize,
) -> Result<EdnTrace, EdnError> {
    if tau == 0 || tau > max_tau {
        return Err(EdnError::TauOutOfRange { tau, max: max_tau });
    }
    forward_trace(p, ctx, tau)
}

pub(crate) fn jacobian_from_trace(
    p: &EdnParams,
    layer: LayerId,
    trace: &EdnTrace,
    tau: usize,
) -> Result<Mat, EdnError> {
    let d = p.layer_len(layer);
    let mut jac = Mat::zeros(OUTPUT_DIM * tau, d);
    let mut seed = Mat::zeros(tau, OUTPUT_DIM);
    for k in 0..tau {
        for j in 0..OUTPUT_DIM {
            seed[(k, j)] = 1.0;
            let mut grads = p.zeros_like();
            // Rows past k are zero; truncating the seed skips their backward work.
            let mut prefix = Mat::zeros(k + 1, OUTPUT_DIM);
            prefix.row_mut(k).copy_from_slice(seed.row(k));
            trace.backward(p, &prefix, &mut grads, layer.is_encoder())?;
            jac.row_mut(OUTPUT_DIM * k + j)
                .copy_from_slice(grads.layer(layer).as_slice());
            seed[(k, j)] = 0.0;
        }
    }
    Ok(jac)
}

/// Sum over steps of the Euclidean distance between rows.
pub fn displacement_sum(pred: &Mat, truth: &Mat) -> f64 {
    (0..pred.rows())
        .map(|k| (pred[(k, 0)] - truth[(k, 0)]).hypot(pred[(k, 1)] - truth[(k, 1)]))
        .sum()
}

/// Mean over samples of the summed per-step displacement.
pub fn loss(p: &EdnParams, batch: &[Sample]) -> Result<f64, EdnError> {
    if batch.is_empty() {
        return Err(EdnError::EmptyBatch);
    }
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let pred = predict(p, &s.context(), s.future.rows())?;
            Ok(displacement_sum(&pred.positions, &s.future))
        })
        .collect::<Result<Vec<f64>, EdnError>>()?;
    Ok(per_sample.iter().sum::<f64>() / batch.len() as f64)
}

/// Loss of one sample and its gradient accumulated into `grads`.
fn sample_loss_grad(p: &EdnParams, s: &Sample, grads: &mut EdnParams) -> Result<f64, EdnError> {
    let trace = forward_trace(p, &s.context(), s.future.rows())?;
    let pred = trace.outputs();
    let mut dy = Mat::zeros(pred.rows(), OUTPUT_DIM);
    let mut total = 0.0;
    for k in 0..pred.rows() {
        let ex = pred[(k, 0)] - s.future[(k, 0)];
        let ey = pred[(k, 1)] - s.future[(k, 1)];
        let d = ex.hypot(ey);
        total += d;
        if d > 1e-12 {
            dy[(k, 0)] = ex / d;
            dy[(k, 1)] = ey / d;
        }
    }
    trace.backward(p, &dy, grads, true)?;
    Ok(total)
}

/// Batch-mean loss and gradient. Chunks are fixed-size and reduced in order,
/// so the result does not depend on the thread count.
pub fn loss_and_grad<S>(p: &EdnParams, batch: &[S]) -> Result<(f64, EdnParams), EdnError>
where
    S: Borrow<Sample> + Sync,
{
    if batch.is_empty() {
        return Err(EdnError::EmptyBatch);
    }
    const CHUNK: usize = 4;
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = p.zeros_like();
            let mut l = 0.0;
            for s in chunk {
                l += sample_loss_grad(p, s.borrow(), &mut g)?;
            }
            Ok((l, g))
        })
        .collect::<Result<Vec<_>, EdnError>>()?;
    let mut grads = p.zeros_like();
    let mut total = 0.0;
    for (l, g) in &partials {
        total += l;
        grads.add_assign(g);
    }
    let n = batch.len() as f64;
    grads.scale_assign(1.0 / n);
    Ok((total / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_clip() -> f64 {
    5.0
}


impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            clip_norm: default_clip(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EdnParams,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
}

/// Minibatch Adam with global-norm clipping. Returns the parameters with the
/// lowest validation loss (training loss when `val` is empty).
pub fn train(
    init: &EdnParams,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EdnError> {
    if train_set.is_empty() {
        return Err(EdnError::EmptyBatch);
    }
    let mut params = init.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, init.clone(), 0usize);
    let batch_size = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (l, mut grads) = loss_and_grad(&params, &batch)?;
            if !l.is_finite() {
                return Err(EdnError::Divergence { epoch, loss: l });
            }
            epoch_loss += l * idx.len() as f64;
            {
                let mut g = grads.tensors_mut();
                clip_global_norm(&mut g, cfg.clip_norm);
            }
            let g = grads.tensors();
            let mut ps = params.tensors_mut();
            adam.step(&mut ps, &g)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            loss(&params, val_set)?
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(EdnError::Divergence {
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        curve.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        curve,
        best_epoch: best.2,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<(), EdnError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EdnError::Format(e.to_string()))?;
    for row in curve {
        w.serialize(row).map_err(|e| EdnError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDims {
    pub state: usize,
    pub goal: usize,
    pub output: usize,
}

/// On-disk model document. Tensor names are `encoder.{w_ih,w_hh,b_ih,b_hh}`,
/// `decoder.{...}` and `fc{1,2,3}.{w,b}`; biases use shape `[n, 1]`. GRU
/// matrices stack gate blocks in the order given by `gate_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub hidden_size: usize,
    pub input_dims: InputDims,
    pub position_scale: f64,
    pub gate_order: String,
    pub fc_activations: [Activation; 3],
    pub layers: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

const GATE_ORDER: &str = "reset,update,new";

fn tensor_names() -> [&'static str; 14] {
    [
        "encoder.w_ih",
        "encoder.w_hh",
        "encoder.b_ih",
        "encoder.b_hh",
        "decoder.w_ih",
        "decoder.w_hh",
        "decoder.b_ih",
        "decoder.b_hh",
        "fc1.w",
        "fc1.b",
        "fc2.w",
        "fc2.b",
        "fc3.w",
        "fc3.b",
    ]
}

fn tensor_shapes(p: &EdnParams) -> [[usize; 2]; 14] {
    let gru = |g: &GruCellParams| {
        [
            [g.w_ih.rows(), g.w_ih.cols()],
            [g.w_hh.rows(), g.w_hh.cols()],
            [g.b_ih.len(), 1],
            [g.b_hh.len(), 1],
        ]
    };
    let dense = |d: &DenseParams| [[d.w.rows(), d.w.cols()], [d.b.len(), 1]];
    let (e, dc) = (gru(&p.encoder), gru(&p.decoder));
    let (f1, f2, f3) = (dense(&p.fc1), dense(&p.fc2), dense(&p.fc3));
    [
        e[0], e[1], e[2], e[3], dc[0], dc[1], dc[2], dc[3], f1[0], f1[1], f2[0], f2[1], f3[0],
        f3[1],
    ]
}

impl ModelFile {
    pub fn from_params(p: &EdnParams, provenance: Option<serde_json::Value>) -> Self {
        let layers = tensor_names()
            .into_iter()
            .zip(tensor_shapes(p))
            .zip(p.tensors())
            .map(|((name, shape), values)| {
                (
                    name.to_string(),
                    TensorEntry {
                        shape,
                        values: values.to_vec(),
                    },
                )
            })
            .collect();
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            hidden_size: p.hidden,
            input_dims: InputDims {
                state: p.input_dim,
                goal: p.goal_dim,
                output: OUTPUT_DIM,
            },
            position_scale: p.position_scale,
            gate_order: GATE_ORDER.to_string(),
            fc_activations: FC_ACTIVATIONS,
            layers,
            provenance,
        }
    }

    pub fn to_params(&self) -> Result<EdnParams, EdnError> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(EdnError::Format(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.gate_order != GATE_ORDER || self.fc_activations != FC_ACTIVATIONS {
            return Err(EdnError::Format(
                "unsupported gate order or activations".into(),
            ));
        }
        if self.input_dims.state != STATE_DIM
            || self.input_dims.goal != GOAL_DIM
            || self.input_dims.output != OUTPUT_DIM
        {
            return Err(EdnError::Format(format!(
                "unsupported input dims {:?}",
                self.input_dims
            )));
        }
        let mut p = EdnParams::zeros(self.hidden_size).with_position_scale(self.position_scale);
        let shapes = tensor_shapes(&p);
        for ((name, shape), dst) in tensor_names()
            .into_iter()
            .zip(shapes)
            .zip(p.tensors_mut())
        {
            let entry = self
                .layers
                .get(name)
                .ok_or_else(|| EdnError::Format(format!("missing tensor {name}")))?;
            if entry.shape != shape || entry.values.len() != dst.len() {
                return Err(EdnError::Format(format!(
                    "tensor {name}: expected shape {shape:?}, got {:?} with {} values",
                    entry.shape,
                    entry.values.len()
                )));
            }
            if entry.values.iter().any(|v| !v.is_finite()) {
                return Err(EdnError::Format(format!("tensor {name} has non-finite values")));
            }
            dst.copy_from_slice(&entry.values);
        }
        Ok(p)
    }
}

pub fn save_model(
    path: &Path,
    p: &EdnParams,
    provenance: Option<serde_json::Value>,
) -> Result<(), EdnError> {
    let doc = ModelFile::from_params(p, provenance);
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EdnParams, EdnError> {
    let doc: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    doc.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ScenarioTag;
    use rand::Rng;

    fn random_params(hidden: usize, seed: u64) -> EdnParams {
        let mut p = EdnParams::init(hidden, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        p
    }

    fn random_ctx(t_h: usize, seed: u64) -> PredictionContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictionContext {
            history: Mat::from_fn(t_h, STATE_DIM, |_, _| rng.random_range(-8.0..8.0)),
            goal: [rng.random_range(0.0..30.0), rng.random_range(-5.0..5.0)],
            frame: EgoFrame::IDENTITY,
        }
    }

    fn sample_with(pred_future: Mat) -> Sample {
        let ctx = random_ctx(10, 3);
        Sample {
            case_id: 1,
            agent_id: 1,
            anchor: 0,
            timestamp_ms: 0,
            history: ctx.history,
            future: pred_future,
            current: [0.0; 5],
            frame: EgoFrame::IDENTITY,
            goal: ctx.goal,
            scenario: ScenarioTag::Trained,
        }
    }

    #[test]
    fn zero_network_encodes_to_zero_and_predicts_origin() {
        let p = EdnParams::zeros(6);
        let ctx = random_ctx(10, 1);
        assert!(encode(&p, &ctx.history).unwrap().iter().all(|&v| v == 0.0));
        let out = predict(&p, &ctx, 30).unwrap();
        assert_eq!(out.horizon(), 30);
        assert!(out.positions.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_runs_one_step_per_history_row() {
        let p = random_params(8, 2);
        let ctx = random_ctx(10, 2);
        let trace = forward_trace(&p, &ctx, 3).unwrap();
        assert_eq!(trace.encoder.len(), 10);
        assert_eq!(trace.horizon(), 3);
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let p = random_params(8, 3);
        let ctx = random_ctx(10, 3);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| ctx.history.row(i).to_vec()).collect();
        rows.reverse();
        let reversed = Mat::from_rows(&rows).unwrap();
        let a = encode(&p, &ctx.history).unwrap();
        let b = encode(&p, &reversed).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn goal_reaches_every_decoder_step() {
        let p = random_params(8, 4);
        let mut ctx = random_ctx(10, 4);
        let a = predict(&p, &ctx, 30).unwrap();
        ctx.goal[0] += 5.0;
        let b = predict(&p, &ctx, 30).unwrap();
        for k in 0..30 {
            assert!(a.positions.row(k) != b.positions.row(k), "step {k}");
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let p = EdnParams::zeros(4);
        let bad = PredictionContext {
            history: Mat::zeros(10, 3),
            goal: [0.0; 2],
            frame: EgoFrame::IDENTITY,
        };
        assert!(matches!(predict(&p, &bad, 5), Err(EdnError::HistoryShape { .. })));
        let ctx = random_ctx(10, 5);
        assert!(matches!(predict(&p, &ctx, 0), Err(EdnError::EmptyHorizon)));
        assert!(matches!(
            jacobian_tau(&p, LayerId::Fc3, &ctx, 0, 30),
            Err(EdnError::TauOutOfRange { .. })
        ));
        assert!(matches!(
            jacobian_tau(&p, LayerId::Fc3, &ctx, 31, 30),
            Err(EdnError::TauOutOfRange { .. })
        ));
        let trace = forward_trace(&p, &ctx, 2).unwrap();
        let mut g = p.zeros_like();
        assert!(trace.backward(&p, &Mat::zeros(3, 2), &mut g, false).is_err());
    }

    #[test]
    fn fc3_jacobian_at_tau_one_is_penultimate_activation() {
        let p = random_params(8, 6);
        let ctx = random_ctx(10, 6);
        let trace = forward_trace(&p, &ctx, 1).unwrap();
        let a2 = &trace.decoder[0].fc[1].out;
        let jac = jacobian_tau(&p, LayerId::Fc3, &ctx, 1, 30).unwrap();
        let h = p.hidden;
        for j in 0..2 {
            for c in 0..2 * h {
                let expected = if c / h == j {
                    p.position_scale * a2[c % h]
                } else {
                    0.0
                };
                assert!((jac[(j, c)] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fc3_jacobian_vanishes_with_zero_penultimate_activation() {
        let mut p = random_params(8, 7);
        p.fc2.w = Mat::zeros(8, 8);
        p.fc2.b = vec![0.0; 8];
        let ctx = random_ctx(10, 7);
        let jac = jacobian_tau(&p, LayerId::Fc3, &ctx, 3, 30).unwrap();
        assert!(jac.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let p = random_params(6, 8);
        let ctx = random_ctx(10, 8);
        let trace = forward_trace(&p, &ctx, 4).unwrap();
        let dy = Mat::from_fn(4, 2, |k, j| (k + 2 * j) as f64 * 0.3 - 0.5);
        let mut g = p.zeros_like();
        let grads = trace.backward(&p, &dy, &mut g, true).unwrap();
        let f = |c: &PredictionContext| {
            let y = predict(&p, c, 4).unwrap().positions;
            y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-5;
        for j in 0..2 {
            let mut cp = ctx.clone();
            cp.goal[j] += eps;
            let mut cm = ctx.clone();
            cm.goal[j] -= eps;
            let num = (f(&cp) - f(&cm)) / (2.0 * eps);
            assert!((num - grads.goal[j]).abs() <= 1e-6 * num.abs().max(1.0));
        }
        let dh = grads.history.unwrap();
        for i in [0, 5, 9] {
            for j in 0..4 {
                let mut cp = ctx.clone();
                cp.history[(i, j)] += eps;
                let mut cm = ctx.clone();
                cm.history[(i, j)] -= eps;
                let num = (f(&cp) - f(&cm)) / (2.0 * eps);
                assert!((num - dh[(i, j)]).abs() <= 1e-6 * num.abs().max(1.0));
            }
        }
    }

    #[test]
    fn loss_examples() {
        let p = EdnParams::zeros(4);
        // Zero net predicts the origin; a future of all zeros matches exactly.
        let exact = sample_with(Mat::zeros(30, 2));
        assert_eq!(loss(&p, &[exact]).unwrap(), 0.0);
        let off = sample_with(Mat::from_fn(30, 2, |_, j| if j == 0 { 3.0 } else { 4.0 }));
        assert!((loss(&p, &[off]).unwrap() - 150.0).abs() < 1e-12);
        assert!(matches!(loss(&p, &[]), Err(EdnError::EmptyBatch)));
    }

    #[test]
    fn loss_matches_brute_force_recomputation() {
        let p = random_params(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<Sample> = (0..5)
            .map(|_| sample_with(Mat::from_fn(30, 2, |_, _| rng.random_range(-5.0..5.0))))
            .collect();
        let mut total = 0.0;
        for s in &batch {
            let y = predict(&p, &s.context(), 30).unwrap().positions;
            for k in 0..30 {
                let dx = y[(k, 0)] - s.future[(k, 0)];
                let dy = y[(k, 1)] - s.future[(k, 1)];
                total += (dx * dx + dy * dy).sqrt();
            }
        }
        let expected = total / 5.0;
        assert!((loss(&p, &batch).unwrap() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = random_params(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch: Vec<Sample> = (0..3)
            .map(|_| sample_with(Mat::from_fn(6, 2, |_, _| rng.random_range(-5.0..5.0))))
            .collect();
        let (_, g) = loss_and_grad(&p, &batch).unwrap();
        let eps = 1e-5;
        for (t, grad) in g.tensors().iter().enumerate() {
            for j in (0..grad.len()).step_by(7) {
                let mut pp = p.clone();
                pp.tensors_mut()[t][j] += eps;
                let mut pm = p.clone();
                pm.tensors_mut()[t][j] -= eps;
                let num = (loss(&pp, &batch).unwrap() - loss(&pm, &batch).unwrap()) / (2.0 * eps);
                assert!(
                    (num - grad[j]).abs() <= 1e-5 * num.abs().max(1e-2),
                    "tensor {t} idx {j}: {num} vs {}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn loss_is_translation_consistent() {
        let p = random_params(6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample_with(Mat::from_fn(30, 2, |_, _| rng.random_range(-5.0..5.0)));
        let pred = predict(&p, &s.context(), 30).unwrap().positions;
        let shift = |m: &Mat| Mat::from_fn(30, 2, |k, j| m[(k, j)] + if j == 0 { 7.5 } else { -2.0 });
        let a = displacement_sum(&pred, &s.future);
        let b = displacement_sum(&shift(&pred), &shift(&s.future));
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn lr_zero_keeps_initial_params() {
        let p = random_params(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Sample> = (0..6)
            .map(|_| sample_with(Mat::from_fn(5, 2, |_, _| rng.random_range(-5.0..5.0))))
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&p, &data, &data[..2], &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.curve.len(), 3);
    }

    #[test]
    fn model_file_round_trip() {
        let p = random_params(5, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &p, Some(serde_json::json!({"seed": 1}))).unwrap();
        assert_eq!(load_model(&path).unwrap(), p);

        let mut doc = ModelFile::from_params(&p, None);
        doc.layers.remove("fc3.w");
        assert!(doc.to_params().is_err());
    }

    #[test]
    fn layer_flatten_round_trip() {
        let mut p = random_params(4, 14);
        for layer in LayerId::ALL {
            let flat = p.flatten_layer(layer);
            let before = p.layer(layer).clone();
            p.set_layer(layer, &flat).unwrap();
            assert_eq!(p.layer(layer), &before);
        }
        assert!(p.set_layer(LayerId::Fc3, &[0.0; 3]).is_err());
    }
}
