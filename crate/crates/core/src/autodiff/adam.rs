use ndarray::Zip;
use thiserror::Error;

use super::params::{GroupId, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable entry in `group`.
///
/// Gradients are left in place; the caller clears them. All gradients of the
/// group are checked for finiteness before anything is written, so a failed
/// step leaves the store untouched.
pub fn adam_step(store: &mut ParamStore, group: GroupId, cfg: &AdamConfig) -> Result<(), OptimError> {
    if let Some(bad) = store
        .entries()
        .iter()
        .filter(|e| e.group == group && e.trainable)
        .find(|e| e.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(OptimError::NonFiniteGradient(bad.name.clone()));
    }
    let step = {
        let g = &mut store.groups[group.0];
        g.step += 1;
        g.step as i32
    };
    let bc1 = 1.0 - cfg.beta1.powi(step);
    let bc2 = 1.0 - cfg.beta2.powi(step);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
    for e in store
        .entries_mut()
        .iter_mut()
        .filter(|e| e.group == group && e.trainable)
    {
        Zip::from(&mut e.value)
            .and(&mut e.first_moment)
            .and(&mut e.second_moment)
            .and(&e.grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Geometric interpolation `start · (end/start)^(step/total)`.
pub fn exp_decay_lr(step: u64, total: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    lr_start * (lr_end / lr_start).powf(frac)
}
