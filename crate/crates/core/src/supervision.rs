//! Uncertainty-driven attention fusion and the structure-prediction loss.

use crossdsr_tensor::{Graph, Real, Tensor, Var};

use crate::data::{ensure_same_dims, DepthMap, StructureMap};
use crate::error::{Error, Result};
use crate::networks::{bind, depth_tensor, Bound, ConvLayer, NetworkParams};

/// Graph form: `sigmoid(conv1x1(pred − gt))`.
pub fn uncertainty_var<T: Real>(g: &mut Graph<T>, p: &Bound, conv: &str, pred: Var, gt: Var) -> Result<Var> {
    let residual = g.sub(pred, gt)?;
    let layer = ConvLayer::same(conv, 1, 1, 1);
    let pre = layer.apply(g, p, residual)?;
    Ok(g.sigmoid(pre))
}

/// Graph form: `[f_sr ⊙ (1 + u_sr), f_de ⊙ (1 + u_de)]`.
pub fn attention_fuse_var<T: Real>(g: &mut Graph<T>, f_sr: Var, f_de: Var, u_sr: Var, u_de: Var) -> Result<Var> {
    let gain_sr = g.add_scalar(u_sr, 1.0);
    let gain_de = g.add_scalar(u_de, 1.0);
    let a = g.mul_channel(f_sr, gain_sr)?;
    let b = g.mul_channel(f_de, gain_de)?;
    Ok(g.concat_channels(a, b)?)
}

pub fn structure_loss_var<T: Real>(g: &mut Graph<T>, s_pred: Var, s_gt: Var) -> Result<Var> {
    Ok(g.l1_mean(s_pred, s_gt)?)
}

/// Per-pixel attention map in `(0, 1)`. Needs ground truth, so it exists
/// only during training.
pub fn uncertainty_map(pred: &DepthMap, gt: Option<&DepthMap>, params: &NetworkParams<f64>, conv: &str) -> Result<DepthMap> {
    let gt = gt.ok_or_else(|| Error::Contract("uncertainty maps need ground truth and are unavailable at inference".into()))?;
    ensure_same_dims("uncertainty_map", pred.dims(), gt.dims())?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let a = g.leaf(depth_tensor(pred), false);
    let b = g.leaf(depth_tensor(gt), false);
    let u = uncertainty_var(&mut g, &p, conv, a, b)?;
    crate::networks::tensor_to_depth(g.value(u), 0)
}

pub fn structure_loss(s_pred: &StructureMap, s_gt: &StructureMap) -> Result<f64> {
    ensure_same_dims("structure_loss", s_pred.dims(), s_gt.dims())?;
    let n = s_pred.values().len() as f64;
    Ok(s_pred.values().iter().zip(s_gt.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Fuses two `[1, c, h, w]` features with their attention maps; the
/// super-resolution branch comes first.
pub fn attention_fuse(f_sr: &Tensor<f64>, f_de: &Tensor<f64>, u_sr: &DepthMap, u_de: &DepthMap) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let a = g.leaf(f_sr.clone(), false);
    let b = g.leaf(f_de.clone(), false);
    let ua = g.leaf(depth_tensor(u_sr), false);
    let ub = g.leaf(depth_tensor(u_de), false);
    let fused = attention_fuse_var(&mut g, a, b, ua, ub)?;
    Ok(g.value(fused).clone())
}
