use crossdsr_tensor::{Graph, Real, Var};
use rand::Rng;

use super::{apply_chain, init_layers, side_head_layers, side_output_head, Bound, ConvLayer, FeatureStack, NetworkParams};
use crate::data::Scale;
use crate::error::{Error, Result};

/// Residual depth-estimation network operating on the HR colour image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeNet {
    pub stage_count: usize,
    pub channels: usize,
    pub residual_units: usize,
    pub scale: Scale,
}

impl DeNet {
    pub fn new(stage_count: usize, channels: usize, residual_units: usize, scale: Scale) -> Self {
        DeNet {
            stage_count,
            channels,
            residual_units,
            scale,
        }
    }

    fn shallow(&self) -> [ConvLayer; 3] {
        let c = self.channels;
        [
            ConvLayer::same("shallow.0", 3, c, 3),
            ConvLayer::same("shallow.1", c, c, 1),
            ConvLayer::same("shallow.2", c, c, 1),
        ]
    }

    fn unit(&self, stage: usize, unit: usize) -> [ConvLayer; 2] {
        let c = self.channels;
        [
            ConvLayer::same(format!("stage{stage}.{unit}.a"), c, c, 3),
            ConvLayer::same(format!("stage{stage}.{unit}.b"), c, c, 3),
        ]
    }

    fn reconstruction(&self) -> ConvLayer {
        ConvLayer::same("recon", self.channels, 1, 3)
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut out: Vec<ConvLayer> = self.shallow().to_vec();
        for s in 0..self.stage_count {
            for u in 0..self.residual_units {
                out.extend(self.unit(s, u));
            }
        }
        out.push(self.reconstruction());
        for n in 0..self.stage_count {
            out.extend(side_head_layers(n, self.channels));
        }
        out
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> NetworkParams<T> {
        init_layers(&self.layers(), self.stage_count, self.scale, rng)
    }

    /// `x` is an `[n, 3, H, W]` colour batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FeatureStack<Var>> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::InvalidArgument(format!("colour input must have 3 channels, got {c}")));
        }
        let mut h = apply_chain(&self.shallow(), g, p, x)?;
        let mut features = Vec::with_capacity(self.stage_count);
        for s in 0..self.stage_count {
            for u in 0..self.residual_units {
                let [a, b] = self.unit(s, u);
                let t = g.relu(h);
                let t = a.apply(g, p, t)?;
                let t = g.relu(t);
                let t = b.apply(g, p, t)?;
                h = g.add(h, t)?;
            }
            features.push(h);
        }
        let final_output = self.reconstruction().apply(g, p, h)?;
        let side_outputs = features
            .iter()
            .enumerate()
            .map(|(n, &f)| side_output_head(g, p, n, self.channels, f))
            .collect::<Result<_>>()?;
        Ok(FeatureStack {
            features,
            side_outputs,
            final_output,
        })
    }
}

