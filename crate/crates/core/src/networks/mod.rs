//! The three trainable models and their shared building blocks.
//!
//! Every network describes its layers as a flat inventory of [`ConvLayer`]s;
//! parameters live in a [`NetworkParams`] map keyed by layer path, so the same
//! description drives initialization, the forward pass and checkpoint
//! validation.

mod denet;
mod dsrnet;
mod spnet;

use std::collections::BTreeMap;

use crossdsr_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ndarray::Array2;

use crate::data::{DepthMap, RgbImage, Scale};
use crate::error::{Error, Result};

pub use denet::DeNet;
pub use dsrnet::DsrNet;
pub use spnet::{SpNet, UncertaintyConvs, SPNET_CONV_LAYERS};

/// Architecture hyper-parameters shared by all networks of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: u32,
    /// Number of back-projection / residual stages, `N`.
    pub stage_count: usize,
    /// Feature width `C` of every stage.
    pub channels: usize,
    /// Pre-activation residual units per depth-estimation stage.
    pub residual_units: usize,
    /// Hidden width of the structure-prediction CNN.
    pub sp_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            stage_count: 5,
            channels: 32,
            residual_units: 4,
            sp_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn scale(&self) -> Result<Scale> {
        Scale::try_from(self.scale)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.scale() {
            out.push(e.to_string());
        }
        if self.stage_count == 0 {
            out.push("model.stage_count must be at least 1".into());
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            out.push("model.channels must be an even number ≥ 2".into());
        }
        if self.residual_units == 0 {
            out.push("model.residual_units must be at least 1".into());
        }
        if self.sp_width == 0 {
            out.push("model.sp_width must be at least 1".into());
        }
        out
    }
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub stage_count: usize,
    pub scale: Scale,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn new(stage_count: usize, scale: Scale) -> Self {
        NetworkParams {
            stage_count,
            scale,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            stage_count: self.stage_count,
            scale: self.scale,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks names and shapes against a layer inventory.
    pub fn validate(&self, layers: &[ConvLayer]) -> Result<()> {
        let mut problems = Vec::new();
        let mut expected = BTreeMap::new();
        for l in layers {
            expected.insert(l.weight_name(), l.weight_shape().to_vec());
            expected.insert(l.bias_name(), vec![l.cout]);
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => problems.push(format!("{name}: missing (expected {shape:?})")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: shape {:?}, expected {shape:?}", t.shape()))
                }
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                problems.push(format!("{name}: unexpected tensor"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("shape mismatch:\n  {}", problems.join("\n  "))))
        }
    }
}

/// Parameter leaves of one network placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is missing")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Adds every tensor of `params` to `g`; `trainable` controls whether
/// gradients flow into them.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &NetworkParams<T>, trainable: bool) -> Bound {
    Bound {
        vars: params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect(),
    }
}

/// One (possibly transposed) convolution with bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            transposed: false,
        }
    }

    pub fn same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::conv(name, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn deconv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            transposed: true,
            ..Self::conv(name, cin, cout, kernel, stride, pad)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.cin, self.cout, self.kernel, self.kernel]
        } else {
            [self.cout, self.cin, self.kernel, self.kernel]
        }
    }

    /// Inputs contributing to one output pixel.
    fn fan_in(&self) -> usize {
        let taps = self.cin * self.kernel * self.kernel;
        if self.transposed {
            (taps / (self.stride * self.stride)).max(1)
        } else {
            taps
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<T: Real, R: Rng>(&self, rng: &mut R, params: &mut NetworkParams<T>) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = self.weight_shape();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        params.insert(self.weight_name(), Tensor::from_vec(&shape, data).expect("shape"));
        params.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&self.weight_name())?;
        let b = p.var(&self.bias_name())?;
        Ok(if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)?
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.pad)?
        })
    }

    pub fn apply_relu<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(g, p, x)?;
        Ok(g.relu(y))
    }
}

/// Per-stage features, per-stage side outputs and the final prediction of one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<V> {
    pub features: Vec<V>,
    pub side_outputs: Vec<V>,
    pub final_output: V,
}

impl FeatureStack<Var> {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> FeatureStack<Tensor<T>> {
        FeatureStack {
            features: self.features.iter().map(|&v| g.value(v).clone()).collect(),
            side_outputs: self.side_outputs.iter().map(|&v| g.value(v).clone()).collect(),
            final_output: g.value(self.final_output).clone(),
        }
    }

    /// Constant copies of every raster, cutting gradient flow.
    pub fn detached<T: Real>(&self, g: &mut Graph<T>) -> FeatureStack<Var> {
        FeatureStack {
            features: self.features.iter().map(|&v| g.detach(v)).collect(),
            side_outputs: self.side_outputs.iter().map(|&v| g.detach(v)).collect(),
            final_output: g.detach(self.final_output),
        }
    }
}

/// Layers of the two-convolution side-output head for stage `stage`.
pub fn side_head_layers(stage: usize, channels: usize) -> [ConvLayer; 2] {
    [
        ConvLayer::same(format!("side{stage}.0"), channels, channels / 2, 3),
        ConvLayer::same(format!("side{stage}.1"), channels / 2, 1, 1),
    ]
}

/// Maps a `C`-channel feature to a single-channel depth map.
pub fn side_output_head<T: Real>(g: &mut Graph<T>, p: &Bound, stage: usize, channels: usize, feature: Var) -> Result<Var> {
    let [hidden, out] = side_head_layers(stage, channels);
    let h = hidden.apply_relu(g, p, feature)?;
    out.apply(g, p, h)
}

/// Kernel/stride/padding of the projection convolutions for each factor,
/// applied in sequence (×16 cascades two ×4 steps).
pub fn projection_steps(scale: Scale) -> Vec<(usize, usize, usize)> {
    match scale {
        Scale::X2 => vec![(6, 2, 2)],
        Scale::X4 => vec![(8, 4, 2)],
        Scale::X8 => vec![(12, 8, 2)],
        Scale::X16 => vec![(8, 4, 2), (8, 4, 2)],
    }
}

pub(crate) fn init_layers<T: Real, R: Rng>(layers: &[ConvLayer], stage_count: usize, scale: Scale, rng: &mut R) -> NetworkParams<T> {
    let mut params = NetworkParams::new(stage_count, scale);
    for l in layers {
        l.init(rng, &mut params);
    }
    params
}

/// Chains layers with a ReLU after each.
pub(crate) fn apply_chain<T: Real>(layers: &[ConvLayer], g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.apply_relu(g, p, x)?;
    }
    Ok(x)
}

/// `[1, 1, h, w]` tensor of a depth map.
pub fn depth_tensor<T: Real>(d: &DepthMap) -> Tensor<T> {
    let (h, w) = d.dims();
    Tensor::from_vec(&[1, 1, h, w], d.values().iter().map(|&v| T::from_f64(v)).collect()).expect("shape")
}

/// `[1, 3, h, w]` tensor of a colour image.
pub fn rgb_tensor<T: Real>(rgb: &RgbImage) -> Tensor<T> {
    let (h, w) = rgb.dims();
    Tensor::from_vec(&[1, 3, h, w], rgb.values().iter().map(|&v| T::from_f64(v)).collect()).expect("shape")
}

/// Depth map of batch item `i` of a single-channel tensor.
pub fn tensor_to_depth<T: Real>(t: &Tensor<T>, i: usize) -> Result<DepthMap> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 || i >= n {
        return Err(Error::Dimension(format!("cannot read depth item {i} from shape {:?}", t.shape())));
    }
    let data = t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.as_f64()).collect();
    DepthMap::new(Array2::from_shape_vec((h, w), data).expect("shape"))
}
