use ndarray::Array2;

use super::{DepthMap, StructureMap};

/// Fixed zero-sum 3×3 high-pass kernel producing structure ground truth.
pub const LAPLACIAN: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]];

/// Convolves `d_hr` with [`LAPLACIAN`] under replicate padding.
pub fn compute_structure_gt(d_hr: &DepthMap) -> StructureMap {
    let v = d_hr.values();
    let (h, w) = v.dim();
    let at = |y: isize, x: isize| v[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let out = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let mut acc = 0.0;
        for (dy, row) in LAPLACIAN.iter().enumerate() {
            for (dx, &k) in row.iter().enumerate() {
                if k != 0.0 {
                    acc += k * at(y + dy as isize - 1, x + dx as isize - 1);
                }
            }
        }
        acc
    });
    StructureMap::new(out)
}
