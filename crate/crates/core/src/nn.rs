//! Neural building blocks with hand-written reverse-mode gradients: a GRU
//! cell, a dense layer and the Adam optimizer.
//!
//! Every forward function has a `*_forward` variant returning a cache that
//! records the intermediate values the matching `*_backward` needs. Chaining
//! caches in execution order gives the tape used by the encoder-decoder.
//!
//! GRU convention (gate blocks stacked `[reset; update; new]` in the `3h`-row
//! matrices):
//!
//! ```text
//! r  = σ(W_r x + b_ir + U_r h + b_hr)
//! z  = σ(W_z x + b_iz + U_z h + b_hz)
//! n  = tanh(W_n x + b_in + r ∘ (U_n h + b_hn))
//! h' = (1 − z) ∘ n + z ∘ h
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{dot, Mat, NumError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("gradient requested for {requested} outputs but only {recorded} were recorded")]
    Unrecorded { requested: usize, recorded: usize },
    #[error("parameter/gradient shape mismatch at tensor {index}")]
    ShapeMismatch { index: usize },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected != got {
        return Err(NnError::Length {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += m · x` for a row-major matrix.
fn gemv_acc(m: &Mat, x: &[f64], out: &mut [f64]) {
    for (o, i) in out.iter_mut().zip(0..m.rows()) {
        *o += dot(m.row(i), x);
    }
}

/// `out += mᵀ · y`.
fn gemv_t_acc(m: &Mat, y: &[f64], out: &mut [f64]) {
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += yi * mij;
        }
    }
}

/// `m += y · xᵀ`.
fn outer_acc(m: &mut Mat, y: &[f64], x: &[f64]) {
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (mij, &xj) in m.row_mut(i).iter_mut().zip(x) {
            *mij += yi * xj;
        }
    }
}

fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize, k: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-k..=k))
}

/// The seven adaptable weight matrices of the encoder-decoder. Biases are
/// never adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    EncIh,
    EncHh,
    DecIh,
    DecHh,
    Fc1,
    Fc2,
    Fc3,
}

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId::EncIh,
        LayerId::EncHh,
        LayerId::DecIh,
        LayerId::DecHh,
        LayerId::Fc1,
        LayerId::Fc2,
        LayerId::Fc3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::EncIh => "enc_ih",
            LayerId::EncHh => "enc_hh",
            LayerId::DecIh => "dec_ih",
            LayerId::DecHh => "dec_hh",
            LayerId::Fc1 => "fc1",
            LayerId::Fc2 => "fc2",
            LayerId::Fc3 => "fc3",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, LayerId::EncIh | LayerId::EncHh)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown layer '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_ih: Mat,
    pub w_hh: Mat,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
    pub hidden_size: usize,
}

impl GruCellParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            w_ih: Mat::zeros(3 * hidden_size, input_size),
            w_hh: Mat::zeros(3 * hidden_size, hidden_size),
            b_ih: vec![0.0; 3 * hidden_size],
            b_hh: vec![0.0; 3 * hidden_size],
            hidden_size,
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let k_ih = 1.0 / (input_size as f64).sqrt();
        let k_hh = 1.0 / (hidden_size as f64).sqrt();
        Self {
            w_ih: uniform_mat(rng, 3 * hidden_size, input_size, k_ih),
            w_hh: uniform_mat(rng, 3 * hidden_size, hidden_size, k_hh),
            ..Self::zeros(input_size, hidden_size)
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden_size)
    }

    /// Tensors in a fixed order: `w_ih, w_hh, b_ih, b_hh`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_ih.as_slice(),
            self.w_hh.as_slice(),
            &self.b_ih,
            &self.b_hh,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_ih.as_mut_slice(),
            self.w_hh.as_mut_slice(),
            &mut self.b_ih,
            &mut self.b_hh,
        ]
    }
}

/// Intermediate values of one GRU step.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `U_n h + b_hn`, the term gated by `r`.
    pub hn: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn gru_step(p: &GruCellParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(gru_forward(p, x, h)?.h)
}

pub fn gru_forward(p: &GruCellParams, x: &[f64], h: &[f64]) -> Result<GruCache, NnError> {
    let hs = p.hidden_size;
    check_len("gru input", p.input_size(), x.len())?;
    check_len("gru hidden", hs, h.len())?;

    let mut gi = p.b_ih.clone();
    gemv_acc(&p.w_ih, x, &mut gi);
    let mut gh = p.b_hh.clone();
    gemv_acc(&p.w_hh, h, &mut gh);

    let mut r = vec![0.0; hs];
    let mut z = vec![0.0; hs];
    let mut n = vec![0.0; hs];
    let mut h_new = vec![0.0; hs];
    for i in 0..hs {
        r[i] = sigmoid(gi[i] + gh[i]);
        z[i] = sigmoid(gi[hs + i] + gh[hs + i]);
        n[i] = (gi[2 * hs + i] + r[i] * gh[2 * hs + i]).tanh();
        h_new[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
    }
    Ok(GruCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        r,
        z,
        n,
        hn: gh[2 * hs..].to_vec(),
        h: h_new,
    })
}

/// Backpropagates `dh` (gradient w.r.t. the step's output hidden state),
/// accumulating parameter gradients into `grads` when given. Returns
/// `(dx, dh_prev)`.
pub fn gru_backward(
    p: &GruCellParams,
    cache: &GruCache,
    dh: &[f64],
    grads: Option<&mut GruCellParams>,
) -> (Vec<f64>, Vec<f64>) {
    let hs = p.hidden_size;
    let mut dgi = vec![0.0; 3 * hs];
    let mut dgh = vec![0.0; 3 * hs];
    let mut dh_prev = vec![0.0; hs];
    for i in 0..hs {
        let (r, z, n) = (cache.r[i], cache.z[i], cache.n[i]);
        let dn_pre = dh[i] * (1.0 - z) * (1.0 - n * n);
        let dz_pre = dh[i] * (cache.h_prev[i] - n) * z * (1.0 - z);
        let dr_pre = dn_pre * cache.hn[i] * r * (1.0 - r);
        dgi[i] = dr_pre;
        dgi[hs + i] = dz_pre;
        dgi[2 * hs + i] = dn_pre;
        dgh[i] = dr_pre;
        dgh[hs + i] = dz_pre;
        dgh[2 * hs + i] = dn_pre * r;
        dh_prev[i] = dh[i] * z;
    }
    if let Some(g) = grads {
        outer_acc(&mut g.w_ih, &dgi, &cache.x);
        outer_acc(&mut g.w_hh, &dgh, &cache.h_prev);
        for (b, d) in g.b_ih.iter_mut().zip(&dgi) {
            *b += d;
        }
        for (b, d) in g.b_hh.iter_mut().zip(&dgh) {
            *b += d;
        }
    }
    let mut dx = vec![0.0; p.input_size()];
    gemv_t_acc(&p.w_ih, &dgi, &mut dx);
    gemv_t_acc(&p.w_hh, &dgh, &mut dh_prev);
    (dx, dh_prev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(input_size: usize, output_size: usize) -> Self {
        Self {
            w: Mat::zeros(output_size, input_size),
            b: vec![0.0; output_size],
        }
    }

    pub fn init(input_size: usize, output_size: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (input_size as f64).sqrt();
        Self {
            w: uniform_mat(rng, output_size, input_size, k),
            b: vec![0.0; output_size],
        }
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn output_size(&self) -> usize {
        self.w.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.output_size())
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.w.as_slice(), &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_mut_slice(), &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
    pub activation: Activation,
}

pub fn dense_forward(
    p: &DenseParams,
    x: &[f64],
    activation: Activation,
) -> Result<Vec<f64>, NnError> {
    Ok(dense_forward_cached(p, x, activation)?.out)
}

pub fn dense_forward_cached(
    p: &DenseParams,
    x: &[f64],
    activation: Activation,
) -> Result<DenseCache, NnError> {
    check_len("dense input", p.input_size(), x.len())?;
    let mut pre = p.b.clone();
    gemv_acc(&p.w, x, &mut pre);
    let out = pre.iter().map(|&v| activation.apply(v)).collect();
    Ok(DenseCache {
        x: x.to_vec(),
        pre,
        out,
        activation,
    })
}

/// Returns `dx`; parameter gradients are accumulated into `grads` when given.
pub fn dense_backward(
    p: &DenseParams,
    cache: &DenseCache,
    dy: &[f64],
    grads: Option<&mut DenseParams>,
) -> Vec<f64> {
    let dpre: Vec<f64> = dy
        .iter()
        .zip(cache.pre.iter().zip(&cache.out))
        .map(|(&d, (&pre, &out))| d * cache.activation.derivative(pre, out))
        .collect();
    if let Some(g) = grads {
        outer_acc(&mut g.w, &dpre, &cache.x);
        for (b, d) in g.b.iter_mut().zip(&dpre) {
            *b += d;
        }
    }
    let mut dx = vec![0.0; p.input_size()];
    gemv_t_acc(&p.w, &dpre, &mut dx);
    dx
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Accumulators sized after `shapes`, the length of each parameter tensor.
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                index: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch { index: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                // An exactly-zero gradient leaves the parameter where it is,
                // even when stale moments would otherwise keep it moving.
                if gj == 0.0 {
                    continue;
                }
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric
            .iter()
            .chain(analytic)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale
    }

    fn random_gru(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruCellParams {
        let mut p = GruCellParams::init(input, hidden, rng);
        p.b_ih = rvec(rng, 3 * hidden);
        p.b_hh = rvec(rng, 3 * hidden);
        p
    }

    fn sq_norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    #[test]
    fn zero_gru_halves_hidden() {
        let p = GruCellParams::zeros(3, 4);
        let h = [0.4, -0.2, 1.0, 0.0];
        let out = gru_step(&p, &[1.0, 2.0, 3.0], &h).unwrap();
        for (o, h) in out.iter().zip(h) {
            assert_eq!(*o, 0.5 * h);
        }
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_gru(&mut rng, 3, 4);
        for i in 4..8 {
            p.b_ih[i] = 30.0;
            p.b_hh[i] = 0.0;
        }
        // Keep the gate pre-activation dominated by the bias.
        for i in 4..8 {
            p.w_ih.row_mut(i).fill(0.0);
            p.w_hh.row_mut(i).fill(0.0);
        }
        let h = rvec(&mut rng, 4);
        let out = gru_step(&p, &rvec(&mut rng, 3), &h).unwrap();
        for (o, h) in out.iter().zip(&h) {
            assert!((o - h).abs() <= 1e-9);
        }
    }

    #[test]
    fn gru_dimension_errors() {
        let p = GruCellParams::zeros(3, 4);
        assert!(gru_step(&p, &[1.0], &[0.0; 4]).is_err());
        assert!(gru_step(&p, &[1.0; 3], &[0.0; 2]).is_err());
    }

    /// Central differences of `‖h'‖²` w.r.t. every GRU parameter and input.
    #[test]
    fn gru_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_gru(&mut rng, 3, 5);
            let x = rvec(&mut rng, 3);
            let h = rvec(&mut rng, 5);
            let cache = gru_forward(&p, &x, &h).unwrap();
            let dh: Vec<f64> = cache.h.iter().map(|v| 2.0 * v).collect();
            let mut grads = p.zeros_like();
            let (dx, dhp) = gru_backward(&p, &cache, &dh, Some(&mut grads));

            let eps = 1e-5;
            let loss = |p: &GruCellParams, x: &[f64], h: &[f64]| sq_norm(&gru_step(p, x, h).unwrap());
            for t in 0..4 {
                let n = p.tensors()[t].len();
                let mut numeric = vec![0.0; n];
                for j in 0..n {
                    let mut pp = p.clone();
                    pp.tensors_mut()[t][j] += eps;
                    let mut pm = p.clone();
                    pm.tensors_mut()[t][j] -= eps;
                    numeric[j] = (loss(&pp, &x, &h) - loss(&pm, &x, &h)) / (2.0 * eps);
                }
                let e = rel_err(grads.tensors()[t], &numeric);
                assert!(e <= 1e-6, "seed {seed} tensor {t}: {e}");
            }
            let num_dx: Vec<f64> = (0..3)
                .map(|j| {
                    let mut xp = x.clone();
                    xp[j] += eps;
                    let mut xm = x.clone();
                    xm[j] -= eps;
                    (loss(&p, &xp, &h) - loss(&p, &xm, &h)) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&dx, &num_dx) <= 1e-6);
            let num_dh: Vec<f64> = (0..5)
                .map(|j| {
                    let mut hp = h.clone();
                    hp[j] += eps;
                    let mut hm = h.clone();
                    hm[j] -= eps;
                    (loss(&p, &x, &hp) - loss(&p, &x, &hm)) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&dhp, &num_dh) <= 1e-6);
        }
    }

    /// Ten unrolled steps with a scalar loss on the final state.
    #[test]
    fn unrolled_gru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_gru(&mut rng, 2, 4);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| rvec(&mut rng, 2)).collect();
        let w = rvec(&mut rng, 4);
        let run = |p: &GruCellParams| {
            let mut h = vec![0.0; 4];
            for x in &xs {
                h = gru_step(p, x, &h).unwrap();
            }
            dot(&w, &h)
        };
        let mut caches = Vec::new();
        let mut h = vec![0.0; 4];
        for x in &xs {
            let c = gru_forward(&p, x, &h).unwrap();
            h = c.h.clone();
            caches.push(c);
        }
        let mut grads = p.zeros_like();
        let mut dh = w.clone();
        for c in caches.iter().rev() {
            dh = gru_backward(&p, c, &dh, Some(&mut grads)).1;
        }
        let eps = 1e-5;
        for t in 0..4 {
            let numeric: Vec<f64> = (0..p.tensors()[t].len())
                .map(|j| {
                    let mut pp = p.clone();
                    pp.tensors_mut()[t][j] += eps;
                    let mut pm = p.clone();
                    pm.tensors_mut()[t][j] -= eps;
                    (run(&pp) - run(&pm)) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(grads.tensors()[t], &numeric) <= 1e-5);
        }
    }

    #[test]
    fn dense_identity_and_relu_clamp() {
        let p = DenseParams {
            w: Mat::identity(3),
            b: vec![0.0; 3],
        };
        let x = [1.5, -2.0, 0.25];
        assert_eq!(dense_forward(&p, &x, Activation::Linear).unwrap(), x);
        let neg = [-1.0, -0.5, -3.0];
        assert_eq!(dense_forward(&p, &neg, Activation::Relu).unwrap(), [0.0; 3]);
        assert!(dense_forward(&p, &[1.0], Activation::Linear).is_err());
    }

    #[test]
    fn tanh_layer_gradient_matches_hand_chain_rule() {
        // f(x) = tanh(Wx) with W = [[2, -1]]: df/dx = (1 - tanh²(Wx)) W.
        let p = DenseParams {
            w: Mat::from_rows(&[vec![2.0, -1.0]]).unwrap(),
            b: vec![0.0],
        };
        let x = [0.3, 0.1];
        let cache = dense_forward_cached(&p, &x, Activation::Tanh).unwrap();
        let mut g = p.zeros_like();
        let dx = dense_backward(&p, &cache, &[1.0], Some(&mut g));
        let s = 1.0 - (0.5f64).tanh().powi(2);
        assert!((dx[0] - 2.0 * s).abs() < 1e-15);
        assert!((dx[1] + s).abs() < 1e-15);
        assert!((g.w[(0, 0)] - 0.3 * s).abs() < 1e-15);
        assert!((g.b[0] - s).abs() < 1e-15);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        // Every pre-activation is negative, so the relu output is the constant 0.
        let p = DenseParams {
            w: Mat::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.1]]).unwrap(),
            b: vec![-5.0, -5.0],
        };
        let cache = dense_forward_cached(&p, &[0.5, 0.5], Activation::Relu).unwrap();
        let mut g = p.zeros_like();
        let dx = dense_backward(&p, &cache, &[1.0, 1.0], Some(&mut g));
        assert!(dx.iter().chain(g.w.as_slice()).chain(&g.b).all(|&v| v == 0.0));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for act in [Activation::Linear, Activation::Tanh, Activation::Relu] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let p = DenseParams {
                w: Mat::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
                b: rvec(&mut rng, 4),
            };
            let x = rvec(&mut rng, 3);
            let loss = |p: &DenseParams, x: &[f64]| sq_norm(&dense_forward(p, x, act).unwrap());
            let cache = dense_forward_cached(&p, &x, act).unwrap();
            let dy: Vec<f64> = cache.out.iter().map(|v| 2.0 * v).collect();
            let mut g = p.zeros_like();
            let dx = dense_backward(&p, &cache, &dy, Some(&mut g));
            let eps = 1e-5;
            for t in 0..2 {
                let numeric: Vec<f64> = (0..p.tensors()[t].len())
                    .map(|j| {
                        let mut pp = p.clone();
                        pp.tensors_mut()[t][j] += eps;
                        let mut pm = p.clone();
                        pm.tensors_mut()[t][j] -= eps;
                        (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps)
                    })
                    .collect();
                assert!(rel_err(g.tensors()[t], &numeric) <= 1e-6, "{act:?}");
            }
            let numeric: Vec<f64> = (0..3)
                .map(|j| {
                    let mut xp = x.clone();
                    xp[j] += eps;
                    let mut xm = x.clone();
                    xm[j] -= eps;
                    (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&dx, &numeric) <= 1e-6, "{act:?}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut state = AdamState::new(0.1, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        for _ in 0..5 {
            state.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = AdamState::new(0.1, &[1]);
        let mut p = vec![0.0];
        state.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut state = AdamState::new(0.05, &[1]);
        let mut theta = vec![1.0];
        for _ in 0..500 {
            let g = [2.0 * theta[0]];
            state.step(&mut [&mut theta], &[&g]).unwrap();
        }
        assert!(theta[0].abs() < 1e-3, "theta = {}", theta[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut state = AdamState::new(0.1, &[2]);
        let mut p = vec![0.0; 3];
        assert!(state.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![4.0];
        let before = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(before, 5.0);
        let after = (a[0] * a[0] + b[0] * b[0]).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_names_round_trip() {
        for l in LayerId::ALL {
            assert_eq!(l.name().parse::<LayerId>().unwrap(), l);
        }
        assert!("fc4".parse::<LayerId>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adam_zero_grads_never_move_params(warm in prop::collection::vec(-5.0f64..5.0, 1..20), steps in 1usize..10) {
                let n = warm.len();
                let mut state = AdamState::new(0.01, &[n]);
                let mut p = vec![0.3; n];
                state.step(&mut [&mut p], &[&warm]).unwrap();
                let before = p.clone();
                for _ in 0..steps {
                    state.step(&mut [&mut p], &[&vec![0.0; n]]).unwrap();
                }
                prop_assert_eq!(p, before);
                prop_assert_eq!(state.step, 1 + steps as u64);
            }
        }
    }
}
