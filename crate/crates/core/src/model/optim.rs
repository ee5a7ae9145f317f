use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ParamSet, LOG_TEMPERATURE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Multiplier on the learning rate of the log-temperature.
    #[serde(default = "one")]
    pub temperature_lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            temperature_lr_scale: 1.0,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW with decoupled weight decay. The temperature is never decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// Clips `grads` (in place) and applies one update to the tensors named in
    /// `trainable` (all tensors when `None`). Returns the pre-clip norm.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &mut ParamSet,
        lr: f64,
        trainable: Option<&BTreeSet<String>>,
    ) -> Result<f64> {
        params.check_layout(grads)?;
        if !self.m.same_layout(params) {
            return Err(Error::shape("optimizer state does not match parameters".to_string()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient has non-finite entries".to_string()));
        }
        let norm = clip_grad_norm(grads, self.config.clip_norm);
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            temperature_lr_scale,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            if trainable.is_some_and(|t| !t.contains(&name)) {
                continue;
            }
            let g = &grads.get(&name).expect("layout checked").data;
            let m = &mut self.m.get_mut(&name).expect("layout checked").data;
            let v = &mut self.v.get_mut(&name).expect("layout checked").data;
            let p = &mut params.get_mut(&name).expect("layout checked").data;
            let (decay, lr) = if name == LOG_TEMPERATURE {
                (0.0, lr * temperature_lr_scale)
            } else {
                (weight_decay, lr)
            };
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
