//! Adam optimizer and the shared learning-rate schedule.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::params::ParamStore;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every gradient entry. Parameters accepted by
    /// `frozen` are skipped entirely (no moment updates either).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            if frozen(name) {
                continue;
            }
            let param = params
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?
                .clone();
            if param.shape() != grad.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} for parameter {name} of shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape()));
            let mut next = param.clone();
            for i in 0..param.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                next.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.set(name, next);
        }
        Ok(())
    }
}

/// Piecewise-linear learning rate: linear warmup to `peak`, a constant
/// plateau, then linear decay to zero over the remaining steps.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_steps: u64, constant_steps: u64) -> f64 {
    assert!(warmup_steps + constant_steps <= total, "schedule phases exceed total steps");
    if total == 0 {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    if step < warmup_steps + constant_steps {
        return peak;
    }
    let decay_steps = total - warmup_steps - constant_steps;
    if decay_steps == 0 {
        return peak;
    }
    let into = step.saturating_sub(warmup_steps + constant_steps);
    let remaining = decay_steps.saturating_sub(into);
    peak * remaining as f64 / decay_steps as f64
}

/// Splits a total step budget into (warmup, constant) step counts from
/// fractions; decay takes the remainder.
pub fn phase_steps(total: u64, warmup_frac: f64, constant_frac: f64) -> (u64, u64) {
    let warmup = (total as f64 * warmup_frac).round() as u64;
    let constant = (total as f64 * constant_frac).round() as u64;
    let constant = constant.min(total - warmup.min(total));
    (warmup.min(total), constant)
}
