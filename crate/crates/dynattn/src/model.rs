//! The DynAttn network: softplus feature gates, input affine, projection,
//! CLS slot, sinusoidal positional encoding, an L-fold weight-tied pre-norm
//! attention encoder, parameter-free horizon conditioning, and two GELU MLP
//! heads feeding the likelihood links.

use crate::diff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::likelihood::{DistParams, LikelihoodFamily};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Subtractive offset inside the gate transform; gates reach exact zero.
pub const GATE_EPS: f64 = 1e-4;
/// Epsilon inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_s() -> usize {
    48
}
fn default_d() -> usize {
    256
}
fn default_head_width() -> usize {
    128
}
fn default_l() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_horizons() -> usize {
    12
}
fn default_en_lambda() -> f64 {
    1e-3
}
fn default_en_alpha() -> f64 {
    0.5
}
fn default_mse_lambda() -> f64 {
    1.0
}
fn default_wmse_alpha() -> f64 {
    3.0
}

/// Fixed hyperparameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Window length S.
    #[serde(default = "default_s")]
    pub s: usize,
    /// Feature count F.
    pub f: usize,
    /// Encoder hidden size d.
    #[serde(default = "default_d")]
    pub d: usize,
    /// MLP head hidden width h.
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    /// Number of weight-tied encoder passes L.
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Horizon count H.
    #[serde(default = "default_horizons")]
    pub horizons: usize,
    #[serde(default = "default_en_lambda")]
    pub en_lambda: f64,
    #[serde(default = "default_en_alpha")]
    pub en_alpha: f64,
    #[serde(default = "default_mse_lambda")]
    pub mse_lambda: f64,
    #[serde(default = "default_wmse_alpha")]
    pub wmse_alpha: f64,
    #[serde(default)]
    pub family: LikelihoodFamily,
}

impl HyperConfig {
    pub fn with_features(f: usize) -> Self {
        HyperConfig {
            s: default_s(),
            f,
            d: default_d(),
            head_width: default_head_width(),
            l: default_l(),
            n_heads: default_heads(),
            horizons: default_horizons(),
            en_lambda: default_en_lambda(),
            en_alpha: default_en_alpha(),
            mse_lambda: default_mse_lambda(),
            wmse_alpha: default_wmse_alpha(),
            family: LikelihoodFamily::Zinb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 || self.horizons < 1 || self.f < 1 {
            return Err(Error::Config("S, H, and F must all be at least 1".into()));
        }
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.en_alpha) {
            return Err(Error::Config("en_alpha must lie in [0,1]".into()));
        }
        if self.en_lambda < 0.0 || self.mse_lambda < 0.0 || self.wmse_alpha < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Closed-form trainable-parameter count:
/// F gates + 2F input affine + (Fd + d) projection + d CLS
/// + (12 d^2 + 13 d) tied attention block + 2(dh + 2h + 1) heads + 1 theta.
pub fn count_parameters(f: usize, d: usize, h: usize) -> usize {
    f + 2 * f + (f * d + d) + d + (12 * d * d + 13 * d) + 2 * (d * h + 2 * h + 1) + 1
}

/// All trainable values of one DynAttn model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: HyperConfig,
    /// Gate logits gamma, length F.
    pub gamma: Vec<f64>,
    pub affine_scale: Vec<f64>,
    pub affine_shift: Vec<f64>,
    /// F x d input projection.
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub cls: Vec<f64>,
    /// d x 3d fused QKV projection.
    pub qkv_w: Vec<f64>,
    pub qkv_b: Vec<f64>,
    pub attn_out_w: Vec<f64>,
    pub attn_out_b: Vec<f64>,
    /// d x 4d FFN expansion.
    pub ffn_w1: Vec<f64>,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Vec<f64>,
    pub ffn_b2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub head_mu_w1: Vec<f64>,
    pub head_mu_b1: Vec<f64>,
    pub head_mu_w2: Vec<f64>,
    pub head_mu_b2: Vec<f64>,
    pub head_pi_w1: Vec<f64>,
    pub head_pi_b1: Vec<f64>,
    pub head_pi_w2: Vec<f64>,
    pub head_pi_b2: Vec<f64>,
    pub raw_theta: Vec<f64>,
}

/// softplus^{-1}(1): gates start at g ~= 1 and theta at ~= 1.
const INV_SOFTPLUS_ONE: f64 = 0.5413248546129181;

impl ModelState {
    /// Seeded initialization: uniform fan-in for projections and MLPs,
    /// gates near 1, zero CLS, unit affine/layer-norm gains.
    pub fn init(config: HyperConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (f, d, h) = (config.f, config.d, config.head_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Ok(ModelState {
            gamma: vec![INV_SOFTPLUS_ONE; f],
            affine_scale: vec![1.0; f],
            affine_shift: vec![0.0; f],
            proj_w: uniform(f * d, f),
            proj_b: vec![0.0; d],
            cls: vec![0.0; d],
            qkv_w: uniform(d * 3 * d, d),
            qkv_b: vec![0.0; 3 * d],
            attn_out_w: uniform(d * d, d),
            attn_out_b: vec![0.0; d],
            ffn_w1: uniform(d * 4 * d, d),
            ffn_b1: vec![0.0; 4 * d],
            ffn_w2: uniform(4 * d * d, 4 * d),
            ffn_b2: vec![0.0; d],
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            head_mu_w1: uniform(d * h, d),
            head_mu_b1: vec![0.0; h],
            head_mu_w2: uniform(h, h),
            head_mu_b2: vec![0.0; 1],
            head_pi_w1: uniform(d * h, d),
            head_pi_b1: vec![0.0; h],
            head_pi_w2: uniform(h, h),
            head_pi_b2: vec![0.0; 1],
            raw_theta: vec![INV_SOFTPLUS_ONE],
            config,
        })
    }

    /// Parameter arrays in declared (checkpoint) order.
    pub fn params(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("gamma", &self.gamma),
            ("affine_scale", &self.affine_scale),
            ("affine_shift", &self.affine_shift),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("cls", &self.cls),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("attn_out_w", &self.attn_out_w),
            ("attn_out_b", &self.attn_out_b),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("head_mu_w1", &self.head_mu_w1),
            ("head_mu_b1", &self.head_mu_b1),
            ("head_mu_w2", &self.head_mu_w2),
            ("head_mu_b2", &self.head_mu_b2),
            ("head_pi_w1", &self.head_pi_w1),
            ("head_pi_b1", &self.head_pi_b1),
            ("head_pi_w2", &self.head_pi_w2),
            ("head_pi_b2", &self.head_pi_b2),
            ("raw_theta", &self.raw_theta),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("gamma", &mut self.gamma),
            ("affine_scale", &mut self.affine_scale),
            ("affine_shift", &mut self.affine_shift),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("cls", &mut self.cls),
            ("qkv_w", &mut self.qkv_w),
            ("qkv_b", &mut self.qkv_b),
            ("attn_out_w", &mut self.attn_out_w),
            ("attn_out_b", &mut self.attn_out_b),
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2),
            ("ffn_b2", &mut self.ffn_b2),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("head_mu_w1", &mut self.head_mu_w1),
            ("head_mu_b1", &mut self.head_mu_b1),
            ("head_mu_w2", &mut self.head_mu_w2),
            ("head_mu_b2", &mut self.head_mu_b2),
            ("head_pi_w1", &mut self.head_pi_w1),
            ("head_pi_b1", &mut self.head_pi_b1),
            ("head_pi_w2", &mut self.head_pi_w2),
            ("head_pi_b2", &mut self.head_pi_b2),
            ("raw_theta", &mut self.raw_theta),
        ]
    }

    /// Enumerated count of trainable scalars; must match
    /// [`count_parameters`] for any valid configuration.
    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// The gate vector g derived from gamma (plain evaluation).
    pub fn gates(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|g| (softplus(*g) - GATE_EPS).max(0.0))
            .collect()
    }

    /// Elastic-net penalty value at the current gates (plain evaluation).
    pub fn elastic_net_penalty(&self) -> f64 {
        let g = self.gates();
        let l1: f64 = g.iter().sum();
        let l2: f64 = g.iter().map(|v| v * v).sum();
        self.config.en_lambda * (self.config.en_alpha * l1 + (1.0 - self.config.en_alpha) * l2)
    }
}

/// Sinusoidal encoding at 1-based position `pos` over `d` channels,
/// base 10000.
pub fn sinusoidal_encoding(pos: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        out[i] = angle.sin();
        if i + 1 < d {
            out[i + 1] = angle.cos();
        }
    }
    out
}

/// Tape handles for every trainable array of a bound model.
pub struct StateVars {
    pub gamma: Var,
    pub affine_scale: Var,
    pub affine_shift: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub cls: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub attn_out_w: Var,
    pub attn_out_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub head_mu_w1: Var,
    pub head_mu_b1: Var,
    pub head_mu_w2: Var,
    pub head_mu_b2: Var,
    pub head_pi_w1: Var,
    pub head_pi_b1: Var,
    pub head_pi_w2: Var,
    pub head_pi_b2: Var,
    pub raw_theta: Var,
}

impl StateVars {
    /// Handles in the same order as [`ModelState::params`].
    pub fn ordered(&self) -> Vec<Var> {
        vec![
            self.gamma,
            self.affine_scale,
            self.affine_shift,
            self.proj_w,
            self.proj_b,
            self.cls,
            self.qkv_w,
            self.qkv_b,
            self.attn_out_w,
            self.attn_out_b,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.head_mu_w1,
            self.head_mu_b1,
            self.head_mu_w2,
            self.head_mu_b2,
            self.head_pi_w1,
            self.head_pi_b1,
            self.head_pi_w2,
            self.head_pi_b2,
            self.raw_theta,
        ]
    }
}

impl ModelState {
    /// Register all parameters on a tape. With `trainable` false the
    /// parameters become constants (inference-only forward).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<StateVars> {
        let (f, d, h) = (self.config.f, self.config.d, self.config.head_width);
        let mut reg = |rows: usize, cols: usize, data: &Vec<f64>| -> Result<Var> {
            if trainable {
                tape.param(rows, cols, data.clone())
            } else {
                tape.constant(rows, cols, data.clone())
            }
        };
        Ok(StateVars {
            gamma: reg(1, f, &self.gamma)?,
            affine_scale: reg(1, f, &self.affine_scale)?,
            affine_shift: reg(1, f, &self.affine_shift)?,
            proj_w: reg(f, d, &self.proj_w)?,
            proj_b: reg(1, d, &self.proj_b)?,
            cls: reg(1, d, &self.cls)?,
            qkv_w: reg(d, 3 * d, &self.qkv_w)?,
            qkv_b: reg(1, 3 * d, &self.qkv_b)?,
            attn_out_w: reg(d, d, &self.attn_out_w)?,
            attn_out_b: reg(1, d, &self.attn_out_b)?,
            ffn_w1: reg(d, 4 * d, &self.ffn_w1)?,
            ffn_b1: reg(1, 4 * d, &self.ffn_b1)?,
            ffn_w2: reg(4 * d, d, &self.ffn_w2)?,
            ffn_b2: reg(1, d, &self.ffn_b2)?,
            ln1_gain: reg(1, d, &self.ln1_gain)?,
            ln1_bias: reg(1, d, &self.ln1_bias)?,
            ln2_gain: reg(1, d, &self.ln2_gain)?,
            ln2_bias: reg(1, d, &self.ln2_bias)?,
            head_mu_w1: reg(d, h, &self.head_mu_w1)?,
            head_mu_b1: reg(1, h, &self.head_mu_b1)?,
            head_mu_w2: reg(h, 1, &self.head_mu_w2)?,
            head_mu_b2: reg(1, 1, &self.head_mu_b2)?,
            head_pi_w1: reg(d, h, &self.head_pi_w1)?,
            head_pi_b1: reg(1, h, &self.head_pi_b1)?,
            head_pi_w2: reg(h, 1, &self.head_pi_w2)?,
            head_pi_b2: reg(1, 1, &self.head_pi_b2)?,
            raw_theta: reg(1, 1, &self.raw_theta)?,
        })
    }
}

/// g = max(softplus(gamma) - eps, 0) on the tape; shape (1, F).
pub fn gate_transform(tape: &mut Tape, gamma: Var) -> Result<Var> {
    let sp = tape.softplus(gamma)?;
    let shifted = tape.add_const(sp, -GATE_EPS)?;
    tape.clamp_min0(shifted)
}

/// lambda * (alpha |g|_1 + (1 - alpha) |g|_2^2) for a non-negative gate
/// vector on the tape.
pub fn elastic_net_penalty(tape: &mut Tape, gates: Var, lambda: f64, alpha: f64) -> Result<Var> {
    let l1 = tape.sum_all(gates)?;
    let sq = tape.mul(gates, gates)?;
    let l2 = tape.sum_all(sq)?;
    let a = tape.scale(l1, lambda * alpha)?;
    let b = tape.scale(l2, lambda * (1.0 - alpha))?;
    tape.add(a, b)
}

fn multihead_attention(tape: &mut Tape, x: Var, sv: &StateVars, n_heads: usize) -> Result<Var> {
    let (_, d) = tape.shape(x);
    let dk = d / n_heads;
    let qkv = tape.matmul(x, sv.qkv_w)?;
    let qkv = tape.add_row(qkv, sv.qkv_b)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = tape.slice_cols(q, i * dk, dk)?;
        let kh = tape.slice_cols(k, i * dk, dk)?;
        let vh = tape.slice_cols(v, i * dk, dk)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, sv.attn_out_w)?;
    tape.add_row(out, sv.attn_out_b)
}

/// One pre-norm encoder block: x + Attn(LN(x)), then x + FFN(LN(x)).
fn encoder_block(tape: &mut Tape, x: Var, sv: &StateVars, n_heads: usize) -> Result<Var> {
    let normed = tape.layer_norm_rows(x, sv.ln1_gain, sv.ln1_bias, LAYER_NORM_EPS)?;
    let attn = multihead_attention(tape, normed, sv, n_heads)?;
    let x = tape.add(x, attn)?;
    let normed = tape.layer_norm_rows(x, sv.ln2_gain, sv.ln2_bias, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(normed, sv.ffn_w1)?;
    let hidden = tape.add_row(hidden, sv.ffn_b1)?;
    let hidden = tape.gelu(hidden)?;
    let ffn = tape.matmul(hidden, sv.ffn_w2)?;
    let ffn = tape.add_row(ffn, sv.ffn_b2)?;
    tape.add(x, ffn)
}

/// Encode one standardized S x F window to the pooled CLS state (1, d).
///
/// `zero_gate` forces one gate to exactly zero (the ablation
/// counterfactual); the gradient path through that gate is severed too.
pub fn encode(
    tape: &mut Tape,
    sv: &StateVars,
    window_values: &[f64],
    config: &HyperConfig,
    zero_gate: Option<usize>,
) -> Result<Var> {
    let (s, f, d) = (config.s, config.f, config.d);
    if window_values.len() != s * f {
        return Err(Error::Shape(format!(
            "window has {} values, expected {}x{}",
            window_values.len(),
            s,
            f
        )));
    }
    let x = tape.constant(s, f, window_values.to_vec())?;
    let mut gates = gate_transform(tape, sv.gamma)?;
    if let Some(j) = zero_gate {
        let mut mask = vec![1.0; f];
        mask[j] = 0.0;
        let mask = tape.constant(1, f, mask)?;
        gates = tape.mul(gates, mask)?;
    }
    let gated = tape.mul_row(x, gates)?;
    let scaled = tape.mul_row(gated, sv.affine_scale)?;
    let shifted = tape.add_row(scaled, sv.affine_shift)?;
    let projected = tape.matmul(shifted, sv.proj_w)?;
    let projected = tape.add_row(projected, sv.proj_b)?;
    let mut pos = Vec::with_capacity(s * d);
    for p in 1..=s {
        pos.extend(sinusoidal_encoding(p, d));
    }
    let pos = tape.constant(s, d, pos)?;
    let projected = tape.add(projected, pos)?;
    // CLS carries no positional term.
    let mut seq = tape.concat_rows(sv.cls, projected)?;
    for _ in 0..config.l {
        seq = encoder_block(tape, seq, sv, config.n_heads)?;
    }
    tape.slice_rows(seq, 0, 1)
}

/// Parameter-free horizon conditioning: h_t plus the sinusoidal encoding
/// evaluated at position h, for h = 1..=H.
pub fn horizon_states(tape: &mut Tape, pooled: Var, horizons: usize) -> Result<Vec<Var>> {
    let (_, d) = tape.shape(pooled);
    let mut out = Vec::with_capacity(horizons);
    for h in 1..=horizons {
        let enc = tape.constant(1, d, sinusoidal_encoding(h, d))?;
        out.push(tape.add(pooled, enc)?);
    }
    Ok(out)
}

fn mlp_head(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul(hidden, w2)?;
    tape.add_row(out, b2)
}

/// Raw (pre-link) head outputs for one horizon state.
pub fn heads_forward(tape: &mut Tape, sv: &StateVars, state: Var) -> Result<(Var, Var)> {
    let raw1 = mlp_head(
        tape,
        state,
        sv.head_mu_w1,
        sv.head_mu_b1,
        sv.head_mu_w2,
        sv.head_mu_b2,
    )?;
    let raw2 = mlp_head(
        tape,
        state,
        sv.head_pi_w1,
        sv.head_pi_b1,
        sv.head_pi_w2,
        sv.head_pi_b2,
    )?;
    Ok((raw1, raw2))
}

/// Full forward for one window: raw head outputs per horizon.
pub fn forward_raw(
    tape: &mut Tape,
    sv: &StateVars,
    window_values: &[f64],
    config: &HyperConfig,
    zero_gate: Option<usize>,
) -> Result<Vec<(Var, Var)>> {
    let pooled = encode(tape, sv, window_values, config, zero_gate)?;
    let states = horizon_states(tape, pooled, config.horizons)?;
    states
        .into_iter()
        .map(|st| heads_forward(tape, sv, st))
        .collect()
}

/// Inference: distribution parameters per horizon for one window.
pub fn predict(state: &ModelState, window_values: &[f64]) -> Result<Vec<DistParams>> {
    predict_with_zero_gate(state, window_values, None)
}

/// Inference with an optional forced-zero gate (ablation counterfactual).
pub fn predict_with_zero_gate(
    state: &ModelState,
    window_values: &[f64],
    zero_gate: Option<usize>,
) -> Result<Vec<DistParams>> {
    let mut tape = Tape::new();
    let sv = state.bind(&mut tape, false)?;
    let raw = forward_raw(&mut tape, &sv, window_values, &state.config, zero_gate)?;
    let theta_raw = state.raw_theta[0];
    Ok(raw
        .into_iter()
        .map(|(r1, r2)| {
            DistParams::from_raw(
                state.config.family,
                tape.scalar(r1),
                tape.scalar(r2),
                theta_raw,
            )
        })
        .collect())
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    state: ModelState,
}

/// Serialize a checkpoint; the byte stream is stable across save/load
/// round trips.
pub fn checkpoint_to_string(state: &ModelState) -> Result<String> {
    serde_json::to_string_pretty(&Checkpoint {
        format_version: CHECKPOINT_VERSION,
        state: state.clone(),
    })
    .map_err(|e| Error::Data(format!("serialize checkpoint: {e}")))
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse checkpoint: {e}")))?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            ck.format_version
        )));
    }
    ck.state.config.validate()?;
    if ck.state.n_params()
        != count_parameters(ck.state.config.f, ck.state.config.d, ck.state.config.head_width)
    {
        return Err(Error::Data("checkpoint parameter arrays inconsistent".into()));
    }
    Ok(ck.state)
}

#[cfg(test)]
pub(crate) fn tiny_config() -> HyperConfig {
    HyperConfig {
        s: 4,
        f: 3,
        d: 8,
        head_width: 4,
        l: 1,
        n_heads: 2,
        horizons: 2,
        en_lambda: 1e-3,
        en_alpha: 0.5,
        mse_lambda: 1.0,
        wmse_alpha: 3.0,
        family: LikelihoodFamily::Zinb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn closed_form_count_matches_reported_values() {
        assert_eq!(count_parameters(104, 256, 128), 883_259);
        assert_eq!(count_parameters(123, 256, 128), 888_180);
        assert_eq!(count_parameters(300, 256, 128), 934_023);
        assert_eq!(count_parameters(500, 256, 128), 985_823);
        for f in [104, 123, 300, 500] {
            assert_eq!(count_parameters(f, 256, 128), 259 * f + 856_323);
        }
    }

    #[test]
    fn enumerated_count_matches_closed_form() {
        for (f, d, h) in [(3, 8, 4), (10, 16, 8), (104, 32, 16)] {
            let mut cfg = HyperConfig::with_features(f);
            cfg.d = d;
            cfg.head_width = h;
            cfg.n_heads = 2;
            let state = ModelState::init(cfg, 0).unwrap();
            assert_eq!(state.n_params(), count_parameters(f, d, h));
        }
    }

    #[test]
    fn gate_transform_closed_forms() {
        let state = |gamma: f64| {
            let mut cfg = tiny_config();
            cfg.f = 1;
            let mut s = ModelState::init(cfg, 0).unwrap();
            s.gamma = vec![gamma];
            s.gates()[0]
        };
        assert_eq!(state(-20.0), 0.0);
        close(state(0.0), std::f64::consts::LN_2 - 1e-4, 1e-12);
        close(state(10.0), 10.0 - 1e-4, 1e-4);
    }

    #[test]
    fn elastic_net_examples() {
        let mut t = Tape::new();
        let g = t.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let p = elastic_net_penalty(&mut t, g, 1.0, 1.0).unwrap();
        assert_eq!(t.scalar(p), 2.0);
        let mut t = Tape::new();
        let g = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let p = elastic_net_penalty(&mut t, g, 0.5, 0.0).unwrap();
        close(t.scalar(p), 2.5, 1e-12);
        let mut t = Tape::new();
        let g = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let p = elastic_net_penalty(&mut t, g, 3.0, 0.7).unwrap();
        assert_eq!(t.scalar(p), 0.0);
    }

    #[test]
    fn zero_gate_equals_zeroed_column() {
        let cfg = tiny_config();
        let mut state = ModelState::init(cfg.clone(), 7).unwrap();
        state.gamma[1] = -30.0; // gate 1 is exactly zero
        assert_eq!(state.gates()[1], 0.0);
        let window: Vec<f64> = (0..cfg.s * cfg.f).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut zeroed = window.clone();
        for s in 0..cfg.s {
            zeroed[s * cfg.f + 1] = 0.0;
        }
        let a = predict(&state, &window).unwrap();
        let b = predict(&state, &zeroed).unwrap();
        assert_eq!(a, b);
        // arbitrary perturbation of the dead column is invisible
        let mut perturbed = window.clone();
        for s in 0..cfg.s {
            perturbed[s * cfg.f + 1] = 1e6 * (s as f64 + 1.0);
        }
        assert_eq!(predict(&state, &perturbed).unwrap(), a);
    }

    #[test]
    fn l_zero_returns_cls_unchanged() {
        let mut cfg = tiny_config();
        cfg.l = 0;
        let mut state = ModelState::init(cfg.clone(), 3).unwrap();
        state.cls = (0..cfg.d).map(|i| i as f64 * 0.1).collect();
        let window = vec![0.5; cfg.s * cfg.f];
        let mut tape = Tape::new();
        let sv = state.bind(&mut tape, false).unwrap();
        let pooled = encode(&mut tape, &sv, &window, &cfg, None).unwrap();
        assert_eq!(tape.value(pooled), state.cls.as_slice());
    }

    #[test]
    fn encode_deterministic_bitwise() {
        let cfg = tiny_config();
        let state = ModelState::init(cfg.clone(), 11).unwrap();
        let window: Vec<f64> = (0..cfg.s * cfg.f).map(|i| (i as f64).cos()).collect();
        let run = || {
            let mut tape = Tape::new();
            let sv = state.bind(&mut tape, false).unwrap();
            let pooled = encode(&mut tape, &sv, &window, &cfg, None).unwrap();
            tape.value(pooled).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn horizon_states_are_distinct_and_share_theta() {
        let cfg = tiny_config();
        let state = ModelState::init(cfg.clone(), 5).unwrap();
        let window = vec![0.3; cfg.s * cfg.f];
        let params = predict(&state, &window).unwrap();
        assert_eq!(params.len(), cfg.horizons);
        assert_ne!(params[0], params[1]);
        let thetas: Vec<f64> = params
            .iter()
            .map(|p| match p {
                DistParams::Zinb { theta, .. } => *theta,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(thetas[0].to_bits(), thetas[1].to_bits());
    }

    #[test]
    fn zero_head_weights_give_baseline_links() {
        let cfg = tiny_config();
        let mut state = ModelState::init(cfg.clone(), 1).unwrap();
        for name in [
            "head_mu_w1",
            "head_mu_b1",
            "head_mu_w2",
            "head_mu_b2",
            "head_pi_w1",
            "head_pi_b1",
            "head_pi_w2",
            "head_pi_b2",
            "raw_theta",
        ] {
            for (n, p) in state.params_mut() {
                if n == name {
                    p.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let window = vec![0.4; cfg.s * cfg.f];
        for p in predict(&state, &window).unwrap() {
            match p {
                DistParams::Zinb { mu, pi, theta } => {
                    close(mu, std::f64::consts::LN_2, 1e-12);
                    close(pi, 0.5, 1e-12);
                    close(theta, std::f64::consts::LN_2, 1e-12);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn feature_permutation_invariance() {
        let cfg = tiny_config();
        let state = ModelState::init(cfg.clone(), 13).unwrap();
        let window: Vec<f64> = (0..cfg.s * cfg.f).map(|i| (i as f64 * 0.21).sin()).collect();
        let baseline = predict(&state, &window).unwrap();

        // permute features [0,1,2] -> [2,0,1] together with all per-feature
        // parameters
        let perm = [2usize, 0, 1];
        let f = cfg.f;
        let d = cfg.d;
        let mut permuted = state.clone();
        for j in 0..f {
            permuted.gamma[j] = state.gamma[perm[j]];
            permuted.affine_scale[j] = state.affine_scale[perm[j]];
            permuted.affine_shift[j] = state.affine_shift[perm[j]];
            for k in 0..d {
                permuted.proj_w[j * d + k] = state.proj_w[perm[j] * d + k];
            }
        }
        let mut window_p = vec![0.0; window.len()];
        for s in 0..cfg.s {
            for j in 0..f {
                window_p[s * f + j] = window[s * f + perm[j]];
            }
        }
        let permuted_out = predict(&permuted, &window_p).unwrap();
        for (a, b) in baseline.iter().zip(&permuted_out) {
            match (a, b) {
                (
                    DistParams::Zinb { mu, pi, theta },
                    DistParams::Zinb {
                        mu: mu2,
                        pi: pi2,
                        theta: theta2,
                    },
                ) => {
                    close(*mu, *mu2, 1e-12);
                    close(*pi, *pi2, 1e-12);
                    close(*theta, *theta2, 1e-12);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let state = ModelState::init(tiny_config(), 21).unwrap();
        save_checkpoint(&path, &state).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn config_validation() {
        let mut cfg = HyperConfig::with_features(10);
        cfg.d = 10;
        cfg.n_heads = 4;
        assert!(cfg.validate().is_err());
        cfg.d = 12;
        assert!(cfg.validate().is_ok());
        cfg.en_alpha = 1.5;
        assert!(cfg.validate().is_err());
    }
}
