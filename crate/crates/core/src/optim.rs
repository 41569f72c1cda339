//! Adam with weight decay, global-norm clipping, and moment telemetry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters (AdamW) instead of
    /// folding it into the gradient.
    #[serde(default = "default_decoupled")]
    pub decoupled_weight_decay: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_decoupled() -> bool {
    true
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            decoupled_weight_decay: default_decoupled(),
        }
    }
}

impl AdamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name} ({b}) must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps ({}) must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!(
                "optimizer.weight_decay ({}) must be non-negative",
                self.weight_decay
            ));
        }
        out
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Aggregates of the moment buffers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VarianceStats {
    /// `Σ √vᵢ` over every parameter element.
    pub var_l1: f64,
    /// `max √vᵢ`.
    pub var_max: f64,
    /// `Σ |mᵢ|`.
    pub mom_l1: f64,
}

pub fn variance_stats(state: &AdamState) -> VarianceStats {
    let mut stats = VarianceStats::default();
    for v in &state.v {
        for &x in v.data() {
            let s = x.sqrt();
            stats.var_l1 += s;
            stats.var_max = stats.var_max.max(s);
        }
    }
    for m in &state.m {
        for &x in m.data() {
            stats.mom_l1 += x.abs();
        }
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    /// Global ℓ2 norm before clipping.
    pub pre_norm: f64,
    pub clipped: bool,
}

/// Scales all gradients by `max_norm / norm` when their global ℓ2 norm
/// exceeds `max_norm`. `names` label the tensors in error messages.
pub fn clip_global_norm(
    grads: &mut [Tensor],
    names: &[String],
    max_norm: f64,
) -> Result<ClipOutcome> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                name: names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("gradient #{i}")),
            });
        }
        sq += g.sum_squares();
    }
    let pre_norm = sq.sqrt();
    if !pre_norm.is_finite() {
        return Err(Error::NonFinite {
            name: "global gradient norm".into(),
        });
    }
    let clipped = pre_norm > max_norm;
    if clipped {
        let scale = max_norm / pre_norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(ClipOutcome { pre_norm, clipped })
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
        decoupled_weight_decay,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let mut gj = g.data()[j];
            if !decoupled_weight_decay {
                gj += weight_decay * pd[j];
            }
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            if decoupled_weight_decay {
                pd[j] -= lr * weight_decay * pd[j];
            }
            pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
