//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::collections::BTreeMap;

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates this parameter has received; drives bias correction.
    pub updates: u64,
}

/// Optimizer state keyed by parameter name.
///
/// Parameters that received no gradient in a step are skipped entirely: no moment
/// update and no weight decay, so unselected adapter groups and retired heads stay put.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    slots: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.slots.get(name)
    }

    /// One optimizer step over `(name, param, grad)` triples.
    pub fn step<'p, I>(&mut self, lr: T, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'p str, &'p mut [T], &'p [T])>,
    {
        if lr.is_nan() || lr <= T::zero() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.len() != grad.len() {
                return Err(Error::shape("adamw_step", format!("{name}: param {} vs grad {}", param.len(), grad.len())));
            }
            if let Some(slot) = self.slots.get(*name) {
                if slot.m.len() != param.len() {
                    return Err(Error::shape("adamw_step", format!("{name}: moments {} vs param {}", slot.m.len(), param.len())));
                }
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2, eps, wd) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps), T::lit(c.weight_decay));
        for (name, param, grad) in updates {
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); param.len()],
                v: vec![T::zero(); param.len()],
                updates: 0,
            });
            slot.updates += 1;
            let t = slot.updates as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let decay = T::one() - lr * wd;
            for ((p, &g), (m, v)) in param.iter_mut().zip(grad).zip(slot.m.iter_mut().zip(slot.v.iter_mut())) {
                *p *= decay;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_max * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_anneal_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Invalid(format!("step {step} outside [0, {total_steps}]")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
