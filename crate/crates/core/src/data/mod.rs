//! RGB-D data types and the training-data pipeline.

mod io;
mod patches;
mod resample;
pub mod shards;
mod structure;
mod toy;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_rgbd_pairs, COLOR_SUFFIX, DEPTH_SUFFIX, read_depth, read_pfm, read_png16, write_depth, write_pfm, write_png16, write_png_rgb, DepthFormat};
pub use patches::{augment_rotate180, extract_patches};
pub use resample::{bicubic_downsample, bicubic_upsample, cubic_kernel, BICUBIC_A};
pub use structure::{compute_structure_gt, LAPLACIAN};
pub use toy::{generate_toy_pairs, generate_toy_scene, MIN_TOY_SIZE};

/// Up-scaling factor between paired LR and HR depth maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Scale {
    X2,
    X4,
    X8,
    X16,
}

impl Scale {
    pub fn factor(self) -> usize {
        match self {
            Scale::X2 => 2,
            Scale::X4 => 4,
            Scale::X8 => 8,
            Scale::X16 => 16,
        }
    }
}

impl TryFrom<u32> for Scale {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            2 => Ok(Scale::X2),
            4 => Ok(Scale::X4),
            8 => Ok(Scale::X8),
            16 => Ok(Scale::X16),
            other => Err(Error::UnsupportedScale(other)),
        }
    }
}

impl From<Scale> for u32 {
    fn from(s: Scale) -> u32 {
        s.factor() as u32
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x{}", self.factor())
    }
}

/// Single-channel depth raster, `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Array2<f64>);

impl DepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("depth map must be at least 1x1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("depth map contains non-finite values".into()));
        }
        Ok(DepthMap(values))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DepthMap(Array2::from_elem((height, width), value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        DepthMap(Array2::from_shape_fn((height, width), |(y, x)| f(y, x)))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn is_normalized(&self) -> bool {
        self.0.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Three-channel colour raster, `[3, height, width]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(Array3<f64>);

impl RgbImage {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 3 {
            return Err(Error::InvalidArgument(format!("rgb image needs 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("rgb image must be non-empty and finite".into()));
        }
        Ok(RgbImage(values))
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

/// High-frequency response of a depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMap(Array2<f64>);

impl StructureMap {
    pub fn new(values: Array2<f64>) -> Self {
        StructureMap(values)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Where a training patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source: String,
    pub y: usize,
    pub x: usize,
    pub rotated: bool,
}

/// Aligned `(LR depth, HR depth, RGB, structure)` tuple at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub d_lr: DepthMap,
    pub d_hr: DepthMap,
    pub rgb: RgbImage,
    pub s_gt: StructureMap,
    pub scale: Scale,
    pub origin: PatchOrigin,
}

impl TrainingSample {
    pub fn new(
        d_lr: DepthMap,
        d_hr: DepthMap,
        rgb: RgbImage,
        s_gt: StructureMap,
        scale: Scale,
        origin: PatchOrigin,
    ) -> Result<Self> {
        let s = scale.factor();
        let (h, w) = d_hr.dims();
        if d_lr.dims() != (h / s, w / s) || h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!(
                "LR {:?} x{s} does not equal HR {:?}",
                d_lr.dims(),
                (h, w)
            )));
        }
        if rgb.dims() != (h, w) || s_gt.dims() != (h, w) {
            return Err(Error::Dimension(format!(
                "rgb {:?} / structure {:?} must match HR {:?}",
                rgb.dims(),
                s_gt.dims(),
                (h, w)
            )));
        }
        Ok(TrainingSample {
            d_lr,
            d_hr,
            rgb,
            s_gt,
            scale,
            origin,
        })
    }
}

/// A colour image with its aligned depth map, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdPair {
    pub name: String,
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

pub(crate) fn ensure_same_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}
