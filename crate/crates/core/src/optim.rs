//! Momentum SGD for network parameters and Adam for quantization parameters.

use serde::{Deserialize, Serialize};

use crate::quant::ScaleTransform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

fn default_eps() -> f32 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Classical momentum: `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
///
/// With `rows = Some((active, row_len))`, only rows whose flag is set are
/// read or written, in `param` and `velocity` alike.
pub fn sgd_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    cfg: &SgdConfig,
    rows: Option<(&[bool], usize)>,
) {
    let update = |p: &mut [f32], g: &[f32], v: &mut [f32]| {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let g = g + cfg.weight_decay * *p;
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    };
    match rows {
        None => update(param, grad, velocity),
        Some((active, row_len)) => {
            for (r, _) in active.iter().enumerate().filter(|(_, &a)| a) {
                let span = r * row_len..(r + 1) * row_len;
                update(&mut param[span.clone()], &grad[span.clone()], &mut velocity[span]);
            }
        }
    }
}

/// Per-element Adam moments. Each element keeps its own step count so that
/// elements skipped while frozen resume with the right bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: Vec<u32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn steps(&self) -> &[u32] {
        &self.t
    }
}

/// Bias-corrected Adam. Elements with `active[i] == false` are untouched.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    cfg: &AdamConfig,
    active: Option<&[bool]>,
) {
    for i in 0..param.len() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        let g = grad[i];
        state.t[i] += 1;
        let t = state.t[i] as i32;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / (1.0 - cfg.beta1.powi(t));
        let v_hat = state.v[i] / (1.0 - cfg.beta2.powi(t));
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Smallest scale allowed after a raw-parameter step.
pub const MIN_SCALE: f32 = 1e-8;

/// Adam over a vector of quantization scales, either directly or through
/// `θ = log₂ S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleOptimizer {
    transform: ScaleTransform,
    state: AdamState,
    /// `log₂ S` when the transform is `Log2`.
    log_scale: Vec<f32>,
    /// Number of raw-scale elements raised to [`MIN_SCALE`].
    pub clamp_events: u64,
}

impl ScaleOptimizer {
    pub fn new(transform: ScaleTransform, scales: &[f32]) -> Self {
        Self {
            transform,
            state: AdamState::new(scales.len()),
            log_scale: match transform {
                ScaleTransform::Raw => Vec::new(),
                ScaleTransform::Log2 => scales.iter().map(|s| s.log2()).collect(),
            },
            clamp_events: 0,
        }
    }

    pub fn transform(&self) -> ScaleTransform {
        self.transform
    }

    /// The optimizer-visible parameter: `S` or `log₂ S`.
    pub fn parameter(&self, scales: &[f32]) -> Vec<f32> {
        match self.transform {
            ScaleTransform::Raw => scales.to_vec(),
            ScaleTransform::Log2 => self.log_scale.clone(),
        }
    }

    /// One step from `∂L/∂S`.
    pub fn step(&mut self, scales: &mut [f32], d_scale: &[f32], cfg: &AdamConfig, active: Option<&[bool]>) {
        match self.transform {
            ScaleTransform::Raw => {
                adam_step(scales, d_scale, &mut self.state, cfg, active);
                for s in scales.iter_mut() {
                    if *s < MIN_SCALE || s.is_nan() {
                        *s = MIN_SCALE;
                        self.clamp_events += 1;
                    }
                }
            }
            ScaleTransform::Log2 => {
                let d_log: Vec<f32> = d_scale
                    .iter()
                    .zip(scales.iter())
                    .map(|(&g, &s)| crate::quant::log2_scale_grad(g, s))
                    .collect();
                let before = self.log_scale.clone();
                adam_step(&mut self.log_scale, &d_log, &mut self.state, cfg, active);
                for ((s, &theta), &old) in scales.iter_mut().zip(&self.log_scale).zip(&before) {
                    if theta.to_bits() != old.to_bits() {
                        *s = theta.exp2();
                    }
                }
            }
        }
    }
}
