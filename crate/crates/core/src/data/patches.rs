use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bicubic_downsample, compute_structure_gt, DepthMap, PatchOrigin, RgbImage, RgbdPair, Scale, StructureMap, TrainingSample};
use crate::error::{Error, Result};

/// Draws `count` random `patch_size²` crops (uniform over pairs, then over
/// positions) and derives the LR input and structure target for each.
pub fn extract_patches(
    pairs: &[RgbdPair],
    patch_size: usize,
    count: usize,
    scale: Scale,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    if patch_size == 0 || !patch_size.is_multiple_of(scale.factor()) {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} must be a positive multiple of {}",
            scale.factor()
        )));
    }
    for p in pairs {
        let (h, w) = p.depth.dims();
        if h < patch_size || w < patch_size {
            return Err(Error::TooSmall {
                name: p.name.clone(),
                height: h,
                width: w,
                patch: patch_size,
            });
        }
        super::ensure_same_dims(&p.name, p.rgb.dims(), (h, w))?;
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no RGB-D pairs to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        // u32 draws keep the stream identical on 32- and 64-bit targets
        let which = rng.random_range(0..pairs.len() as u32) as usize;
        let pair = &pairs[which];
        let (h, w) = pair.depth.dims();
        let y = rng.random_range(0..=(h - patch_size) as u32) as usize;
        let x = rng.random_range(0..=(w - patch_size) as u32) as usize;
        let d_hr = DepthMap::new(
            pair.depth
                .values()
                .slice(s![y..y + patch_size, x..x + patch_size])
                .to_owned(),
        )?;
        let rgb = RgbImage::new(
            pair.rgb
                .values()
                .slice(s![.., y..y + patch_size, x..x + patch_size])
                .to_owned(),
        )?;
        let d_lr = bicubic_downsample(&d_hr, scale.factor())?;
        let s_gt = compute_structure_gt(&d_hr);
        let origin = PatchOrigin {
            source: pair.name.clone(),
            y,
            x,
            rotated: false,
        };
        out.push(TrainingSample::new(d_lr, d_hr, rgb, s_gt, scale, origin)?);
    }
    Ok(out)
}

fn rot2(a: &Array2<f64>) -> Array2<f64> {
    a.slice(s![..;-1, ..;-1]).to_owned()
}

fn rot3(a: &Array3<f64>) -> Array3<f64> {
    a.slice(s![.., ..;-1, ..;-1]).to_owned()
}

/// Rotates every raster of the sample by 180°.
pub fn augment_rotate180(sample: &TrainingSample) -> TrainingSample {
    TrainingSample {
        d_lr: DepthMap(rot2(sample.d_lr.values())),
        d_hr: DepthMap(rot2(sample.d_hr.values())),
        rgb: RgbImage(rot3(sample.rgb.values())),
        s_gt: StructureMap(rot2(sample.s_gt.values())),
        scale: sample.scale,
        origin: PatchOrigin {
            rotated: !sample.origin.rotated,
            ..sample.origin.clone()
        },
    }
}
