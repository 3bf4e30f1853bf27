//! AdamW with decoupled weight decay and a single step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{ParamGroup, ParamKind, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment buffers for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![T::ZERO; len], v: vec![T::ZERO; len] }
    }
}

/// One AdamW update of `param` in place. `step` is the 1-based step count
/// after this update.
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(shape_err(
            "adamw_step",
            format!("param {} / grad {} / moments {}", param.len(), grad.len(), state.m.len()),
        ));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let lr_t = T::lit(lr);
    let decay = T::ONE - T::lit(lr * weight_decay);
    let eps = T::lit(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::ONE - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::ONE - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for every trainable tensor in a store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<Moments<T>>>,
    frozen: Vec<ParamGroup>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let moments = store
            .iter()
            .map(|(_, e)| e.is_trainable().then(|| Moments::zeros(e.tensor.numel())))
            .collect();
        Self { cfg, step: 0, moments, frozen: Vec::new() }
    }

    /// Leave tensors of `group` untouched by future steps.
    pub fn freeze(&mut self, group: ParamGroup) {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
    }

    /// Apply accumulated gradients with learning rate `lr`. Weight decay
    /// applies to matrices and kernels (rank >= 2) only.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let ParamKind::Trainable(group) = store.entry(id).kind else { continue };
            if self.frozen.contains(&group) {
                continue;
            }
            let Some(state) = self.moments[id.0].as_mut() else { continue };
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[T]>::to_vec) else { continue };
            let wd = if t.rank() >= 2 { self.cfg.weight_decay } else { 0.0 };
            adamw_step(t.data_mut(), &grad, state, self.step, lr, &self.cfg, wd)?;
        }
        Ok(())
    }
}

/// Base rate until `decay_at` of the run, then `base * factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub decay_at: f64,
}

impl StepDecay {
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        if (step as f64) < self.decay_at * total as f64 {
            self.base
        } else {
            self.base * self.factor
        }
    }
}
