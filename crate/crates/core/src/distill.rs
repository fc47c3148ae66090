//! Recovery-error scoring, teacher/student selection and the two
//! distillation losses.

use crossdsr_tensor::{Graph, Real, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ensure_same_dims, DepthMap};
use crate::error::{Error, Result};
use crate::networks::depth_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Dsr,
    De,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Dsr => Role::De,
            Role::De => Role::Dsr,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Dsr => "DSR",
            Role::De => "DE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub teacher: Role,
    pub student: Role,
    pub e_dsr: f64,
    pub e_de: f64,
}

impl RoleAssignment {
    /// Assignment with the given teacher regardless of the scores.
    pub fn forced(teacher: Role, e_dsr: f64, e_de: f64) -> Self {
        RoleAssignment {
            teacher,
            student: teacher.other(),
            e_dsr,
            e_de,
        }
    }
}

pub fn mean_abs_error(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    ensure_same_dims("mean_abs_error", pred.dims(), gt.dims())?;
    let n = pred.values().len() as f64;
    Ok(pred.values().iter().zip(gt.values()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// The network with the lower (or equal) error teaches.
pub fn select_roles(e_dsr: f64, e_de: f64) -> Result<RoleAssignment> {
    for (name, e) in [("e_dsr", e_dsr), ("e_de", e_de)] {
        if !e.is_finite() {
            return Err(Error::Diverged(format!("{name} is {e}")));
        }
        if e < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} must be ≥ 0, got {e}")));
        }
    }
    let teacher = if e_dsr <= e_de { Role::Dsr } else { Role::De };
    Ok(RoleAssignment::forced(teacher, e_dsr, e_de))
}

/// Row-stochastic `(hw)×(hw)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(Array2<f64>);

impl AffinityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }
}

/// Average-pooling factor that brings an `h×w` raster down to about
/// `pool_size` pixels on its shorter side.
pub fn pool_factor(h: usize, w: usize, pool_size: usize) -> Result<usize> {
    if pool_size == 0 {
        return Err(Error::InvalidArgument("affinity pool size must be positive".into()));
    }
    let k = (h.min(w) / pool_size).max(1);
    if !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::Dimension(format!(
            "feature {h}×{w} cannot be pooled to {pool_size} (factor {k} does not divide it)"
        )));
    }
    Ok(k)
}

pub fn affinity_var<T: Real>(g: &mut Graph<T>, feature: Var, pool_size: usize) -> Result<Var> {
    let (_, _, h, w) = g.value(feature).dims4()?;
    let k = pool_factor(h, w, pool_size)?;
    let pooled = if k > 1 { g.avg_pool(feature, k)? } else { feature };
    Ok(g.affinity(pooled)?)
}

/// Affinity of a single `[1, c, h, w]` feature (or `[c, h, w]`).
pub fn affinity(feature: &Tensor<f64>, pool_size: usize) -> Result<AffinityMatrix> {
    let t = match feature.shape().len() {
        3 => {
            let s = feature.shape();
            feature.clone().reshape(&[1, s[0], s[1], s[2]])?
        }
        4 if feature.shape()[0] == 1 => feature.clone(),
        _ => return Err(Error::Dimension(format!("expected one feature raster, got {:?}", feature.shape()))),
    };
    if !t.all_finite() {
        return Err(Error::InvalidArgument("feature contains non-finite values".into()));
    }
    let mut g = Graph::new();
    let v = g.leaf(t, false);
    let a = affinity_var(&mut g, v, pool_size)?;
    let out = g.value(a);
    let n = out.shape()[1];
    Ok(AffinityMatrix(Array2::from_shape_vec((n, n), out.data().to_vec()).expect("square")))
}

fn constant_copy<T: Real>(g: &mut Graph<T>, v: Var) -> Var {
    if g.requires_grad(v) {
        g.detach(v)
    } else {
        v
    }
}

fn check_lengths(student: usize, teacher: usize) -> Result<()> {
    if student != teacher || student == 0 {
        return Err(Error::Dimension(format!(
            "distillation needs two equally long non-empty lists, got {student} and {teacher}"
        )));
    }
    Ok(())
}

/// Mean over stages of the per-pixel L1 distance between side outputs.
/// The teacher side is treated as a constant.
pub fn output_space_loss_var<T: Real>(g: &mut Graph<T>, student: &[Var], teacher: &[Var]) -> Result<Var> {
    check_lengths(student.len(), teacher.len())?;
    let w = 1.0 / student.len() as f64;
    let mut terms = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        let t = constant_copy(g, t);
        terms.push((g.l1_mean(s, t)?, w));
    }
    Ok(g.weighted_sum(&terms)?)
}

/// Mean over stages of the per-entry L1 distance between pooled affinities.
/// The teacher side is treated as a constant.
pub fn affinity_space_loss_var<T: Real>(g: &mut Graph<T>, student: &[Var], teacher: &[Var], pool_size: usize) -> Result<Var> {
    check_lengths(student.len(), teacher.len())?;
    let w = 1.0 / student.len() as f64;
    let mut terms = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        let t = constant_copy(g, t);
        let a_s = affinity_var(g, s, pool_size)?;
        let a_t = affinity_var(g, t, pool_size)?;
        terms.push((g.l1_mean(a_s, a_t)?, w));
    }
    Ok(g.weighted_sum(&terms)?)
}

pub fn distill_loss_var<T: Real>(g: &mut Graph<T>, l_o: Var, l_a: Option<Var>, gamma: f64) -> Result<Var> {
    match l_a {
        Some(a) => Ok(g.weighted_sum(&[(l_o, 1.0), (a, gamma)])?),
        None => Ok(l_o),
    }
}

pub fn output_space_loss(sr_outputs: &[DepthMap], de_outputs: &[DepthMap]) -> Result<f64> {
    check_lengths(sr_outputs.len(), de_outputs.len())?;
    let mut g = Graph::<f64>::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (x, y) in sr_outputs.iter().zip(de_outputs) {
        ensure_same_dims("output_space_loss", x.dims(), y.dims())?;
        a.push(g.leaf(depth_tensor(x), false));
        b.push(g.leaf(depth_tensor(y), false));
    }
    let l = output_space_loss_var(&mut g, &a, &b)?;
    Ok(g.value(l).item())
}

/// Features are `[1, c, h, w]` tensors.
pub fn affinity_space_loss(sr_features: &[Tensor<f64>], de_features: &[Tensor<f64>], pool_size: usize) -> Result<f64> {
    check_lengths(sr_features.len(), de_features.len())?;
    let mut g = Graph::<f64>::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (x, y) in sr_features.iter().zip(de_features) {
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "affinity_space_loss: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        a.push(g.leaf(x.clone(), false));
        b.push(g.leaf(y.clone(), false));
    }
    let l = affinity_space_loss_var(&mut g, &a, &b, pool_size)?;
    Ok(g.value(l).item())
}

pub fn distill_loss(l_o: f64, l_a: f64, gamma: f64) -> f64 {
    l_o + gamma * l_a
}
