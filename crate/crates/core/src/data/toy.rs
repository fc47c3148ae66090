//! Procedural RGB-D scenes for small-scale experiments.
//!
//! A scene is a sloped background plane with 3–8 axis-aligned rectangles and
//! discs at distinct depth planes. Colour is a fixed colour map of depth with
//! per-object texture noise. About one object in ten is camouflaged (coloured
//! like the background behind it, so its depth edge has no colour edge) and
//! some objects carry stripes (colour edges with no depth edge).

use std::f64::consts::TAU;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DepthMap, RgbImage, RgbdPair};
use crate::error::{Error, Result};

pub const MIN_TOY_SIZE: usize = 32;

const PLANE_LEVELS: usize = 10;
const CAMOUFLAGE_RATE: f64 = 0.1;
const STRIPE_RATE: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

struct Object {
    shape: Shape,
    depth: f64,
    camouflaged: bool,
    stripes: Option<(f64, f64)>,
}

fn colour_map(d: f64) -> [f64; 3] {
    let t = 0.9 * d;
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|phase| 0.5 + 0.5 * (TAU * (t + phase)).cos())
}

/// Renders one deterministic scene of `size × size` pixels.
pub fn generate_toy_scene(seed: u64, size: usize) -> Result<(RgbImage, DepthMap)> {
    if size < MIN_TOY_SIZE {
        return Err(Error::InvalidArgument(format!(
            "toy scene size {size} is below the minimum of {MIN_TOY_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let base = rng.random_range(0.7..0.85);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let background = |y: f64, x: f64| base + gy * (y / n - 0.5) + gx * (x / n - 0.5);

    let count = rng.random_range(3..=8u32) as usize;
    let mut levels: Vec<usize> = (0..PLANE_LEVELS).collect();
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.random_range(0..levels.len() as u32) as usize;
        let depth = 0.1 + 0.05 * levels.swap_remove(pick) as f64;
        let shape = if rng.random_bool(0.5) {
            let hh = rng.random_range(n / 8.0..n / 2.0);
            let ww = rng.random_range(n / 8.0..n / 2.0);
            let y0 = rng.random_range(0.0..n - hh);
            let x0 = rng.random_range(0.0..n - ww);
            Shape::Rect { y0, x0, y1: y0 + hh, x1: x0 + ww }
        } else {
            let r = rng.random_range(n / 12.0..n / 4.0);
            Shape::Disc {
                cy: rng.random_range(r..n - r),
                cx: rng.random_range(r..n - r),
                r,
            }
        };
        let camouflaged = rng.random_bool(CAMOUFLAGE_RATE);
        let stripes = rng
            .random_bool(STRIPE_RATE)
            .then(|| (rng.random_range(3.0..8.0), rng.random_range(0.0..TAU)));
        objects.push(Object { shape, depth, camouflaged, stripes });
    }
    // painter's order: far planes first so nearer objects occlude them
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut label: Array2<Option<usize>> = Array2::from_elem((size, size), None);
    for (i, obj) in objects.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                if obj.shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label[[y, x]] = Some(i);
                }
            }
        }
    }

    let mut depth = Array2::<f64>::zeros((size, size));
    let mut rgb = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let bg = background(fy, fx);
            let (d, colour, amp) = match label[[y, x]] {
                None => (bg, colour_map(bg), 0.02),
                Some(i) => {
                    let obj = &objects[i];
                    let mut c = colour_map(if obj.camouflaged { bg } else { obj.depth });
                    if let Some((period, phase)) = obj.stripes {
                        let band = if ((fx + fy) / period + phase).sin() > 0.0 { 0.15 } else { -0.15 };
                        c = c.map(|v| v + band);
                    }
                    (obj.depth, c, 0.04)
                }
            };
            depth[[y, x]] = d.clamp(0.0, 1.0);
            for (ch, &v) in colour.iter().enumerate() {
                rgb[[ch, y, x]] = (v + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
            }
        }
    }
    Ok((RgbImage::new(rgb)?, DepthMap::new(depth)?))
}

/// `count` scenes named `toy-000`, `toy-001`, ... with seeds `first_seed + i`.
pub fn generate_toy_pairs(first_seed: u64, count: usize, size: usize) -> Result<Vec<RgbdPair>> {
    (0..count)
        .map(|i| {
            let (rgb, depth) = generate_toy_scene(first_seed + i as u64, size)?;
            Ok(RgbdPair {
                name: format!("toy-{i:03}"),
                rgb,
                depth,
            })
        })
        .collect()
}
