//! Task losses for both networks and the evaluation metrics.

use std::sync::Arc;

use crossdsr_tensor::{GaussianWindow, Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::data::{ensure_same_dims, DepthMap};
use crate::error::{Error, Result};
use crate::networks::depth_tensor;

/// Trade-off weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the affinity term inside the distillation loss.
    pub gamma: f64,
    /// SSIM share of the depth-estimation loss.
    pub lambda: f64,
    /// Weight of the structure loss.
    pub rho1: f64,
    /// Weight of the distillation loss.
    pub rho2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.5,
            lambda: 0.2,
            rho1: 0.1,
            rho2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("rho1", self.rho1), ("rho2", self.rho2)] {
            if !v.is_finite() || v < 0.0 {
                out.push(format!("loss.{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if self.lambda > 1.0 {
            out.push(format!("loss.lambda must lie in [0, 1], got {}", self.lambda));
        }
        out
    }
}

/// Gaussian-window SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn gaussian(&self) -> Arc<GaussianWindow> {
        Arc::new(GaussianWindow::new(self.window, self.sigma))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window == 0 || self.window.is_multiple_of(2) {
            out.push(format!("ssim.window must be odd and positive, got {}", self.window));
        }
        if !(self.sigma > 0.0) {
            out.push(format!("ssim.sigma must be positive, got {}", self.sigma));
        }
        out
    }
}

/// Graph form of the L1 task loss of the super-resolution network.
pub fn dsr_loss_var<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    Ok(g.l1_mean(pred, gt)?)
}

/// Graph form of `λ(1 − SSIM)/2 + (1 − λ)·L1`.
pub fn de_loss_var<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    lambda: f64,
    ssim: &SsimConfig,
    window: &Arc<GaussianWindow>,
) -> Result<Var> {
    let s = g.ssim(pred, gt, window.clone(), ssim.c1(), ssim.c2())?;
    let l1 = g.l1_mean(pred, gt)?;
    // λ(1 − s)/2 = λ/2 − (λ/2)·s
    let mixed = g.weighted_sum(&[(s, -lambda / 2.0), (l1, 1.0 - lambda)])?;
    Ok(g.add_scalar(mixed, lambda / 2.0))
}

/// Graph form of `task + ρ1·structure + ρ2·distillation`.
pub fn total_student_loss_var<T: Real>(
    g: &mut Graph<T>,
    task: Var,
    structure: Option<Var>,
    distill: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms = vec![(task, 1.0)];
    if let Some(s) = structure {
        terms.push((s, w.rho1));
    }
    if let Some(d) = distill {
        terms.push((d, w.rho2));
    }
    Ok(g.weighted_sum(&terms)?)
}

fn eval_pair(a: &DepthMap, b: &DepthMap, f: impl FnOnce(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    ensure_same_dims("loss inputs", a.dims(), b.dims())?;
    let mut g = Graph::new();
    let va = g.leaf(depth_tensor(a), false);
    let vb = g.leaf(depth_tensor(b), false);
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).item())
}

pub fn dsr_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    eval_pair(pred, gt, dsr_loss_var)
}

/// Mean SSIM with the default 11×11 Gaussian window.
pub fn ssim(a: &DepthMap, b: &DepthMap) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &DepthMap, b: &DepthMap, cfg: &SsimConfig) -> Result<f64> {
    let (h, w) = a.dims();
    if h < cfg.window || w < cfg.window {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {0}×{0} pixels, got {h}×{w}",
            cfg.window
        )));
    }
    let window = cfg.gaussian();
    eval_pair(a, b, |g, x, y| Ok(g.ssim(x, y, window, cfg.c1(), cfg.c2())?))
}

pub fn de_loss(pred: &DepthMap, gt: &DepthMap, lambda: f64) -> Result<f64> {
    de_loss_with(pred, gt, lambda, &SsimConfig::default())
}

pub fn de_loss_with(pred: &DepthMap, gt: &DepthMap, lambda: f64, cfg: &SsimConfig) -> Result<f64> {
    let (h, w) = pred.dims();
    if h < cfg.window || w < cfg.window {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {0}×{0} pixels, got {h}×{w}",
            cfg.window
        )));
    }
    let window = cfg.gaussian();
    eval_pair(pred, gt, |g, a, b| de_loss_var(g, a, b, lambda, cfg, &window))
}

pub fn total_student_loss(task: f64, structure: f64, distill: f64, w: &LossWeights) -> f64 {
    task + w.rho1 * structure + w.rho2 * distill
}

/// Mean absolute difference in native units.
pub fn mad_metric(pred: &DepthMap, gt: &DepthMap, unit_scale: f64) -> Result<f64> {
    ensure_same_dims("metric inputs", pred.dims(), gt.dims())?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, t)| (p * unit_scale - t * unit_scale).abs())
        .sum();
    Ok(sum / n)
}

/// Root mean squared difference in native units.
pub fn rmse_metric(pred: &DepthMap, gt: &DepthMap, unit_scale: f64) -> Result<f64> {
    ensure_same_dims("metric inputs", pred.dims(), gt.dims())?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, t)| (p * unit_scale - t * unit_scale).powi(2))
        .sum();
    Ok((sum / n).sqrt())
}
