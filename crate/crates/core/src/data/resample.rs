//! Separable bicubic resampling with clamp-to-edge borders.

use ndarray::Array2;

use super::DepthMap;
use crate::error::{Error, Result};

/// Keys cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(index, weight)` for every output sample along one axis.
///
/// `support_scale > 1` stretches the kernel, which is the anti-alias
/// prefilter used when shrinking.
fn taps(in_len: usize, out_len: usize, support_scale: f64) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    let radius = 2.0 * support_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut raw: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - center) / support_scale, BICUBIC_A);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match raw.iter_mut().find(|(k, _)| *k == idx) {
                    Some((_, acc)) => *acc += w,
                    None => raw.push((idx, w)),
                }
            }
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(k, w)| (k, w / total)).collect()
        })
        .collect()
}

fn resample(src: &Array2<f64>, out_h: usize, out_w: usize, support_scale: f64) -> Array2<f64> {
    let (h, w) = src.dim();
    let tx = taps(w, out_w, support_scale);
    let ty = taps(h, out_h, support_scale);
    let mut horiz = Array2::<f64>::zeros((h, out_w));
    for y in 0..h {
        for (x, row_taps) in tx.iter().enumerate() {
            horiz[[y, x]] = row_taps.iter().map(|&(k, wt)| wt * src[[y, k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (y, col_taps) in ty.iter().enumerate() {
        for x in 0..out_w {
            out[[y, x]] = col_taps.iter().map(|&(k, wt)| wt * horiz[[k, x]]).sum();
        }
    }
    out
}

/// Shrinks `d_hr` by an integer factor using an anti-aliased bicubic filter.
pub fn bicubic_downsample(d_hr: &DepthMap, scale: usize) -> Result<DepthMap> {
    let (h, w) = d_hr.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible by scale {scale}; crop first"
        )));
    }
    DepthMap::new(resample(d_hr.values(), h / scale, w / scale, scale as f64))
}

/// Enlarges `d_lr` by an integer factor with plain bicubic interpolation.
pub fn bicubic_upsample(d_lr: &DepthMap, scale: usize) -> Result<DepthMap> {
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let (h, w) = d_lr.dims();
    DepthMap::new(resample(d_lr.values(), h * scale, w * scale, 1.0))
}
