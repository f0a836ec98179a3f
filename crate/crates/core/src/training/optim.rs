//! Adaptive moment estimation with decoupled weight decay.

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`.
///
/// Decay multiplies the weights by `1 − lr·weight_decay` before the moment
/// update is subtracted; it never enters the moments.
pub fn optimizer_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut MomentState,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::mismatch("optimizer_step", &[param.len()], &[grad.len(), state.m.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] = param[i] * decay - cfg.lr * update;
    }
    Ok(())
}

/// AdamW over an ordered list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<MomentState>,
    step: u64,
    skipped: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            states: params.iter().map(|p| MomentState::zeros(p.numel())).collect(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates skipped because a gradient was non-finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one update. Returns `false` (and leaves everything untouched)
    /// when any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<bool> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::mismatch(
                "AdamW::step",
                &[self.states.len()],
                &[params.len(), grads.len()],
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            warn!(
                "non-finite gradient; skipping optimizer step ({} skipped so far)",
                self.skipped
            );
            return Ok(false);
        }
        self.step += 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            optimizer_step(p.data_mut(), g.data(), s, self.step, &self.config)?;
        }
        Ok(true)
    }
}
