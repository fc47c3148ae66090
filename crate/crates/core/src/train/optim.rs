use std::collections::BTreeMap;

use crossdsr_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetworkParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    /// Accepted as an alias of `beta1`; a different value is rejected.
    pub momentum: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            momentum: None,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(format!("optimizer.{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.epsilon > 0.0) {
            out.push(format!("optimizer.epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(m) = self.momentum {
            if m != self.beta1 {
                out.push(format!("optimizer.momentum ({m}) must equal optimizer.beta1 ({})", self.beta1));
            }
        }
        out
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched; a non-finite gradient aborts before anything is modified.
pub fn optimizer_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient of {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for parameter {name}")));
        }
    }
    if grads.is_empty() {
        return Ok(());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(cfg.epsilon);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1t * *mv + ob1 * gv;
            *vv = b2t * *vv + ob2 * gv * gv;
            *pv -= step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Step schedule: `initial · factor^⌊(epoch − 1) / period⌋`.
pub fn lr_at_epoch(epoch: usize, initial: f64, factor: f64, period: usize) -> f64 {
    let decays = epoch.saturating_sub(1) / period.max(1);
    initial * factor.powi(decays as i32)
}
