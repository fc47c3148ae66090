use crossdsr_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use super::{init_layers, Bound, ConvLayer, NetworkParams};
use crate::data::Scale;
use crate::error::{Error, Result};

pub const SPNET_CONV_LAYERS: usize = 6;

/// Structure-prediction CNN over the fused `2C`-channel feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpNet {
    pub channels: usize,
    pub width: usize,
}

impl SpNet {
    pub fn new(channels: usize, width: usize) -> Self {
        SpNet { channels, width }
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        (0..SPNET_CONV_LAYERS)
            .map(|i| {
                let cin = if i == 0 { 2 * self.channels } else { self.width };
                let cout = if i + 1 == SPNET_CONV_LAYERS { 1 } else { self.width };
                ConvLayer::same(format!("sp.{i}"), cin, cout, 3)
            })
            .collect()
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R, scale: Scale) -> NetworkParams<T> {
        init_layers(&self.layers(), 0, scale, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, fused: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(fused).dims4()?;
        if c != 2 * self.channels {
            return Err(Error::InvalidArgument(format!(
                "structure network expects {} channels, got {c}",
                2 * self.channels
            )));
        }
        let layers = self.layers();
        let mut x = fused;
        for (i, l) in layers.iter().enumerate() {
            x = if i + 1 == layers.len() { l.apply(g, p, x)? } else { l.apply_relu(g, p, x)? };
        }
        Ok(x)
    }
}

/// The two single-channel 1×1 convolutions that turn residuals into attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UncertaintyConvs;

impl UncertaintyConvs {
    pub const SR: &'static str = "unc_sr";
    pub const DE: &'static str = "unc_de";

    pub fn layers(&self) -> Vec<ConvLayer> {
        vec![ConvLayer::same(Self::SR, 1, 1, 1), ConvLayer::same(Self::DE, 1, 1, 1)]
    }

    /// Weight 1, bias 0 for both branches.
    pub fn init<T: Real>(&self, scale: Scale) -> NetworkParams<T> {
        let mut params = NetworkParams::new(0, scale);
        for l in self.layers() {
            params.insert(l.weight_name(), Tensor::full(&[1, 1, 1, 1], T::one()));
            params.insert(l.bias_name(), Tensor::zeros(&[1]));
        }
        params
    }
}
