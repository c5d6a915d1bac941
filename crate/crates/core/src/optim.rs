//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

/// One AdamW update. Moments are allocated on the first call; afterwards the
/// parameter list must keep the same layout.
pub fn adamw_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adamw: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "adamw: parameter {i} has {} elements, gradient has {}",
                p.len(),
                g.len()
            )));
        }
    }
    if state.t == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::shape("adamw: parameter layout changed between steps"));
    }

    let cfg = state.config;
    let clip = match cfg.grad_clip {
        Some(max_norm) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let step = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = cfg.eps as f32;
    let clip = clip as f32;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let denom = (v[i] * inv_bc2).sqrt() + eps;
            p[i] = p[i] * decay - step * m[i] / denom;
        }
    }
    Ok(())
}

/// `lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / total))`.
pub fn cosine_anneal(lr0: f64, lr_min: f64, t: u64, total: u64) -> Result<f64> {
    if t > total {
        return Err(Error::invalid(format!("schedule step {t} exceeds total {total}")));
    }
    if !(lr_min > 0.0) || lr0 < lr_min {
        return Err(Error::invalid(format!(
            "schedule needs lr0 >= lr_min > 0, got lr0={lr0}, lr_min={lr_min}"
        )));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}
