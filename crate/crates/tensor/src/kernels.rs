//! Low-level numeric kernels shared by the graph operations.

use crate::real::Real;

/// Geometry of a 2-D convolution window sliding over a `c × h × w` plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` for which `ox * stride - pad + kj` lands inside the row.
    #[inline]
    fn valid_range(&self, kj: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= len_in - 1
        let hi_num = len_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.min(len_out as isize) as usize;
        let hi = (hi + 1).clamp(0, len_out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds `src` (`c × h × w`) into `cols` (`c·k·k × ho·wo`).
pub fn im2col<T: Real>(src: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    debug_assert_eq!(src.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * ho * wo);
    if g.is_pointwise() {
        cols.copy_from_slice(src);
        return;
    }
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.height, ho);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (xlo, xhi) = g.valid_range(kj, g.width, wo);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let srow = &plane[iy * g.width..(iy + 1) * g.width];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `dst`, accumulating.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    debug_assert_eq!(dst.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * ho * wo);
    if g.is_pointwise() {
        for (d, &c) in dst.iter_mut().zip(cols) {
            *d += c;
        }
        return;
    }
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.height, ho);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (xlo, xhi) = g.valid_range(kj, g.width, wo);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        for (d, &s) in drow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            drow[ox * g.stride + kj - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) · op(b) + beta·c` for row-major operands.
///
/// `a` is `m×k` (stored `k×m` when `ta`), `b` is `k×n` (stored `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically stable softmax over each row of a `rows × cols` matrix.
pub fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Normalized separable Gaussian window used by SSIM.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWindow {
    size: usize,
    sigma: f64,
    taps: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(size: usize, sigma: f64) -> Self {
        assert!(size >= 1 && sigma > 0.0);
        let center = (size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        GaussianWindow {
            size,
            sigma,
            taps: raw.into_iter().map(|v| v / total).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Valid-mode separable filtering of an `h × w` plane.
    pub fn filter_valid<T: Real>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.size;
        let (ho, wo) = (h + 1 - k, w + 1 - k);
        let taps: Vec<T> = self.taps.iter().map(|&t| T::from_f64(t)).collect();
        let mut horiz = vec![T::zero(); h * wo];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let drow = &mut horiz[y * wo..(y + 1) * wo];
            for (x, d) in drow.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (t, &s) in taps.iter().zip(&srow[x..x + k]) {
                    acc += *t * s;
                }
                *d = acc;
            }
        }
        let mut out = vec![T::zero(); ho * wo];
        for y in 0..ho {
            let drow = &mut out[y * wo..(y + 1) * wo];
            for (i, t) in taps.iter().enumerate() {
                let srow = &horiz[(y + i) * wo..(y + i + 1) * wo];
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d += *t * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`filter_valid`](Self::filter_valid): maps a `(h-k+1) × (w-k+1)`
    /// plane back to `h × w`.
    pub fn filter_valid_adjoint<T: Real>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.size;
        let (ho, wo) = (h + 1 - k, w + 1 - k);
        let taps: Vec<T> = self.taps.iter().map(|&t| T::from_f64(t)).collect();
        let mut vert = vec![T::zero(); h * wo];
        for y in 0..ho {
            let srow = &src[y * wo..(y + 1) * wo];
            for (i, t) in taps.iter().enumerate() {
                let drow = &mut vert[(y + i) * wo..(y + i + 1) * wo];
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d += *t * s;
                }
            }
        }
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            let srow = &vert[y * wo..(y + 1) * wo];
            let drow = &mut out[y * w..(y + 1) * w];
            for (x, &s) in srow.iter().enumerate() {
                for (t, d) in taps.iter().zip(&mut drow[x..x + k]) {
                    *d += *t * s;
                }
            }
        }
        out
    }
}
