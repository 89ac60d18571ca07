//! AdamW with a per-epoch linear-warmup / cosine-decay learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl WarmupCosine {
    /// Linear ramp from `warmup_start_lr` to `base_lr` over the warmup epochs,
    /// then cosine decay towards 0 at `total_epochs`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * t
        } else {
            let span = self.total_epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
            let t = ((epoch - self.warmup_epochs) as f64 / span).min(1.0);
            0.5 * self.base_lr * (1.0 + (PI * t).cos())
        }
    }
}

/// Shared sanity checks for a warmup-cosine AdamW training run.
pub(crate) fn check_schedule(
    what: &str,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    warmup_start_lr: f64,
    warmup_epochs: usize,
    total_epochs: usize,
) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidArgument(format!("{what}: {msg}")));
    if batch_size == 0 {
        return fail("batch_size must be >= 1".into());
    }
    if !(lr > 0.0) || !(warmup_start_lr > 0.0) {
        return fail(format!("learning rates must be positive (lr {lr}, warmup start {warmup_start_lr})"));
    }
    if !(weight_decay >= 0.0) {
        return fail(format!("weight_decay must be >= 0, got {weight_decay}"));
    }
    if warmup_epochs >= total_epochs {
        return fail(format!(
            "warmup_epochs ({warmup_epochs}) must be below total epochs ({total_epochs})"
        ));
    }
    Ok(())
}

/// Decoupled weight decay Adam. Parameters are addressed by slot so one
/// optimizer can drive several tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the step counter; call once per minibatch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, lr: f64, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let m = &mut self.first[slot];
        let v = &mut self.second[slot];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
