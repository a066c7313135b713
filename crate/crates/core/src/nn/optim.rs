use serde::{Deserialize, Serialize};

use crate::error::{AdcError, Result};
use crate::nn::params::ParamStore;

/// Adam hyper-parameters plus a step-decay schedule on the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.9,
            decay_every: 10,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.decay_every >= 1;
        if ok {
            Ok(())
        } else {
            Err(AdcError::Validation(format!("invalid Adam configuration {self:?}")))
        }
    }

    /// `lr * decay_factor^floor(epoch / decay_every)`
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.decay_every.max(1)) as i32;
        self.lr * self.decay_factor.powi(decays)
    }
}

/// One Adam update from the accumulated gradients, which are cleared
/// afterwards.
///
/// A parameter whose gradient is exactly zero is left untouched, moments
/// included; a store with no non-zero gradient at all does not advance its
/// step counter.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, epoch: usize) -> Result<()> {
    for p in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(AdcError::Numerics(format!("gradient of parameter '{}'", p.name)));
        }
    }
    let any = store.iter().any(|p| p.grad.iter().any(|g| *g != 0.0));
    if !any {
        return Ok(());
    }
    store.step_count += 1;
    let t = store.step_count as i32;
    let lr = cfg.effective_lr(epoch);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (params, ms, vs) = store.split_mut();
    for ((p, m), v) in params.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()) {
        if p.grad.iter().all(|g| *g == 0.0) {
            continue;
        }
        for i in 0..p.values.len() {
            let g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}
