use crossdsr_tensor::{Graph, Real, Var};
use rand::Rng;

use super::{apply_chain, init_layers, projection_steps, side_head_layers, side_output_head, Bound, ConvLayer, FeatureStack, NetworkParams};
use crate::data::Scale;
use crate::error::{Error, Result};

/// Back-projection super-resolution network operating on the raw LR map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsrNet {
    pub stage_count: usize,
    pub channels: usize,
    pub scale: Scale,
}

impl DsrNet {
    pub fn new(stage_count: usize, channels: usize, scale: Scale) -> Self {
        DsrNet {
            stage_count,
            channels,
            scale,
        }
    }

    fn shallow(&self) -> [ConvLayer; 3] {
        let c = self.channels;
        [
            ConvLayer::same("shallow.0", 1, c, 3),
            ConvLayer::same("shallow.1", c, c, 1),
            ConvLayer::same("shallow.2", c, c, 1),
        ]
    }

    fn up(&self, name: &str) -> Vec<ConvLayer> {
        let c = self.channels;
        projection_steps(self.scale)
            .into_iter()
            .enumerate()
            .map(|(i, (k, s, p))| ConvLayer::deconv(format!("{name}.{i}"), c, c, k, s, p))
            .collect()
    }

    fn down(&self, name: &str) -> Vec<ConvLayer> {
        let c = self.channels;
        projection_steps(self.scale)
            .into_iter()
            .enumerate()
            .map(|(i, (k, s, p))| ConvLayer::conv(format!("{name}.{i}"), c, c, k, s, p))
            .collect()
    }

    fn up_block(&self, n: usize) -> [Vec<ConvLayer>; 3] {
        [self.up(&format!("up{n}.a")), self.down(&format!("up{n}.b")), self.up(&format!("up{n}.c"))]
    }

    fn down_block(&self, n: usize) -> [Vec<ConvLayer>; 3] {
        [self.down(&format!("down{n}.a")), self.up(&format!("down{n}.b")), self.down(&format!("down{n}.c"))]
    }

    fn reconstruction(&self) -> ConvLayer {
        ConvLayer::same("recon", self.channels, 1, 3)
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut out: Vec<ConvLayer> = self.shallow().to_vec();
        for n in 0..self.stage_count {
            if n > 0 {
                out.extend(self.down_block(n).into_iter().flatten());
            }
            out.extend(self.up_block(n).into_iter().flatten());
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

    /// `x` is an `[n, 1, h, w]` LR batch; every output is at `h·s × w·s`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FeatureStack<Var>> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 1 {
            return Err(Error::InvalidArgument(format!("depth input must have 1 channel, got {c}")));
        }
        let mut low = apply_chain(&self.shallow(), g, p, x)?;
        let mut features = Vec::with_capacity(self.stage_count);
        for n in 0..self.stage_count {
            if n > 0 {
                let [a, b, c] = self.down_block(n);
                let high = *features.last().expect("previous stage");
                let l0 = apply_chain(&a, g, p, high)?;
                let h0 = apply_chain(&b, g, p, l0)?;
                let err = g.sub(h0, high)?;
                let l1 = apply_chain(&c, g, p, err)?;
                low = g.add(l0, l1)?;
            }
            let [a, b, c] = self.up_block(n);
            let h0 = apply_chain(&a, g, p, low)?;
            let l0 = apply_chain(&b, g, p, h0)?;
            let err = g.sub(l0, low)?;
            let h1 = apply_chain(&c, g, p, err)?;
            features.push(g.add(h0, h1)?);
        }
        let final_output = self.reconstruction().apply(g, p, *features.last().expect("N ≥ 1"))?;
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
