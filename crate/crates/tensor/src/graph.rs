use std::sync::Arc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{col2im_add, gemm, im2col, softmax_rows, ConvGeometry, GaussianWindow};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Sum(Var),
    MulChannel(Var, Var),
    Concat(Var, Var),
    AvgPool(Var, usize),
    Affinity(Var),
    L1Mean(Var, Var),
    Ssim {
        a: Var,
        b: Var,
        window: Arc<GaussianWindow>,
        c1: f64,
        c2: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations supporting one reverse pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds an input or parameter tensor to the tape.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf holding a copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(mismatch("conv2d", self.value(x).shape(), self.value(w).shape()));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(invalid("conv2d", "kernel larger than padded input or zero stride"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(mismatch("conv2d bias", self.value(b).shape(), &[cout]));
            }
        }
        let g = ConvGeometry { channels: cin, height: h, width: wd, kernel: kh, stride, pad };
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = vec![T::zero(); g.col_rows() * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &g, &mut cols);
                let dst = &mut od[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                gemm(cout, g.col_rows(), ho * wo, wv, false, &cols, false, T::zero(), dst);
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Transposed convolution; `w` has layout `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(mismatch("conv_transpose2d", self.value(x).shape(), self.value(w).shape()));
        }
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(invalid("conv_transpose2d", "degenerate output geometry"));
        }
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (wd - 1) * stride + kw - 2 * pad;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(mismatch("conv_transpose2d bias", self.value(b).shape(), &[cout]));
            }
        }
        // Output-side geometry: a convolution over the output recovers the input grid.
        let g = ConvGeometry { channels: cout, height: ho, width: wo, kernel: kh, stride, pad };
        debug_assert_eq!((g.out_height(), g.out_width()), (h, wd));
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = vec![T::zero(); g.col_rows() * h * wd];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                gemm(g.col_rows(), cin, h * wd, wv, true, xi, false, T::zero(), &mut cols);
                col2im_add(&cols, &g, &mut od[i * cout * ho * wo..(i + 1) * cout * ho * wo]);
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(out, Op::AddScalar(x), needs)
    }

    /// `f[n, c, h, w] * s[n, 0, h, w]`, broadcasting `s` over channels.
    pub fn mul_channel(&mut self, f: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(f).dims4()?;
        let sd = self.value(s).dims4()?;
        if sd != (n, 1, h, w) {
            return Err(mismatch("mul_channel", self.value(f).shape(), self.value(s).shape()));
        }
        let mut out = self.value(f).clone();
        let sv = self.value(s).data();
        let hw = h * w;
        for (plane_idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let scale = &sv[(plane_idx / c) * hw..(plane_idx / c + 1) * hw];
            for (o, &k) in plane.iter_mut().zip(scale) {
                *o *= k;
            }
        }
        let needs = self.needs(f) || self.needs(s);
        Ok(self.push(out, Op::MulChannel(f, s), needs))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch("concat_channels", self.value(a).shape(), self.value(b).shape()));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Non-overlapping `k × k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        if k == 1 {
            let out = self.value(x).clone();
            let needs = self.needs(x);
            return Ok(self.push(out, Op::AvgPool(x, 1), needs));
        }
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let xv = self.value(x).data();
        for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * wo + xx / k] += src[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool(x, k), needs))
    }

    /// Row-stochastic pixel affinity `softmax_rows(R Rᵀ)` per sample, where
    /// `R` is the `(h·w) × c` reshaping of the feature. Output `[n, hw, hw]`.
    pub fn affinity(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, hw, hw]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for i in 0..n {
                let f = &xv[i * c * hw..(i + 1) * c * hw];
                let a = &mut od[i * hw * hw..(i + 1) * hw * hw];
                gemm(hw, c, hw, f, true, f, false, T::zero(), a);
                softmax_rows(a, hw);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Affinity(x), needs))
    }

    /// Scalar `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l1_mean", ta.shape(), tb.shape()));
        }
        let total: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let out = Tensor::scalar(total / T::from_f64(ta.numel() as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::L1Mean(a, b), needs))
    }

    /// Scalar mean SSIM over every valid window position of every plane.
    pub fn ssim(&mut self, a: Var, b: Var, window: Arc<GaussianWindow>, c1: f64, c2: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("ssim", ta.shape(), tb.shape()));
        }
        let (n, c, h, w) = ta.dims4()?;
        let k = window.size();
        if h < k || w < k {
            return Err(invalid("ssim", format!("{h}x{w} image smaller than {k}x{k} window")));
        }
        let hw = h * w;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for p in 0..n * c {
            let pa = &ta.data()[p * hw..(p + 1) * hw];
            let pb = &tb.data()[p * hw..(p + 1) * hw];
            let m = SsimMoments::compute(&window, pa, pb, h, w);
            for i in 0..m.len() {
                total += m.ssim_at(i, c1, c2).as_f64();
            }
            count += m.len();
        }
        let out = Tensor::scalar(T::from_f64(total / count as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Ssim { a, b, window, c1, c2 }, needs))
    }

    /// `Σ cᵢ·xᵢ` over same-shape inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| invalid("weighted_sum", "no terms"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let tv = self.value(v);
            if tv.shape() != shape.as_slice() {
                return Err(mismatch("weighted_sum", &shape, tv.shape()));
            }
            let c = T::from_f64(c);
            for (o, &x) in out.data_mut().iter_mut().zip(tv.data()) {
                *o += c * x;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Reverse pass from a scalar `loss`, seeding `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(idx, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(x, w, b, stride, pad, dy, grads),
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                self.conv_transpose2d_backward(x, w, b, stride, pad, dy, grads)
            }
            &Op::Relu(x) => {
                let mut g = dy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                }
                self.accumulate(grads, x, g);
            }
            &Op::Sigmoid(x) => {
                let mut g = dy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y * (T::one() - y);
                }
                self.accumulate(grads, x, g);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.map(|v| -v));
            }
            &Op::AddScalar(x) => self.accumulate(grads, x, dy.clone()),
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let data = dy.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, a, Tensor::from_vec(dy.shape(), data).expect("shape"));
                }
                if self.needs(b) {
                    let data = dy.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, b, Tensor::from_vec(dy.shape(), data).expect("shape"));
                }
            }
            &Op::Sum(x) => {
                let g = Tensor::full(self.value(x).shape(), dy.item());
                self.accumulate(grads, x, g);
            }
            &Op::MulChannel(f, s) => {
                let (n, c, h, w) = self.value(f).dims4().expect("rank-4");
                let hw = h * w;
                let (fv, sv) = (self.value(f).data(), self.value(s).data());
                if self.needs(f) {
                    let mut g = dy.clone();
                    for (p, plane) in g.data_mut().chunks_mut(hw).enumerate() {
                        let scale = &sv[(p / c) * hw..(p / c + 1) * hw];
                        for (gv, &k) in plane.iter_mut().zip(scale) {
                            *gv *= k;
                        }
                    }
                    self.accumulate(grads, f, g);
                }
                if self.needs(s) {
                    let mut g = Tensor::zeros(&[n, 1, h, w]);
                    let gd = g.data_mut();
                    for p in 0..n * c {
                        let i = p / c;
                        let dst = &mut gd[i * hw..(i + 1) * hw];
                        for ((d, &dyv), &fvv) in dst
                            .iter_mut()
                            .zip(&dy.data()[p * hw..(p + 1) * hw])
                            .zip(&fv[p * hw..(p + 1) * hw])
                        {
                            *d += dyv * fvv;
                        }
                    }
                    self.accumulate(grads, s, g);
                }
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4().expect("rank-4");
                let cb = self.value(b).dims4().expect("rank-4").1;
                let hw = h * w;
                let d = dy.data();
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&d[base..base + ca * hw]);
                    gb.extend_from_slice(&d[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, a, Tensor::from_vec(&[n, ca, h, w], ga).expect("shape"));
                self.accumulate(grads, b, Tensor::from_vec(&[n, cb, h, w], gb).expect("shape"));
            }
            &Op::AvgPool(x, k) => {
                let (n, c, h, w) = self.value(x).dims4().expect("rank-4");
                let (_, _, ho, wo) = dy.dims4().expect("rank-4");
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for (p, dst) in g.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, x, g);
            }
            &Op::Affinity(x) => {
                let (n, c, h, w) = self.value(x).dims4().expect("rank-4");
                let hw = h * w;
                let xv = self.value(x).data();
                let av = node.value.data();
                let mut g = Tensor::zeros(&[n, c, h, w]);
                let mut sym = vec![T::zero(); hw * hw];
                for i in 0..n {
                    let a = &av[i * hw * hw..(i + 1) * hw * hw];
                    let da = &dy.data()[i * hw * hw..(i + 1) * hw * hw];
                    // softmax backward, row-wise
                    for r in 0..hw {
                        let ar = &a[r * hw..(r + 1) * hw];
                        let dar = &da[r * hw..(r + 1) * hw];
                        let dot: T = ar.iter().zip(dar).map(|(&p, &q)| p * q).sum();
                        for (s, (&p, &q)) in sym[r * hw..(r + 1) * hw].iter_mut().zip(ar.iter().zip(dar)) {
                            *s = p * (q - dot);
                        }
                    }
                    // logits L = Fᵀ F  =>  dF = F (G + Gᵀ)
                    for r in 0..hw {
                        for s in r + 1..hw {
                            let v = sym[r * hw + s] + sym[s * hw + r];
                            sym[r * hw + s] = v;
                            sym[s * hw + r] = v;
                        }
                        sym[r * hw + r] = sym[r * hw + r] + sym[r * hw + r];
                    }
                    let f = &xv[i * c * hw..(i + 1) * c * hw];
                    let dst = &mut g.data_mut()[i * c * hw..(i + 1) * c * hw];
                    gemm(c, hw, hw, f, false, &sym, false, T::zero(), dst);
                }
                self.accumulate(grads, x, g);
            }
            &Op::L1Mean(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = dy.item() / T::from_f64(ta.numel() as f64);
                let data: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(ta.shape(), data).expect("shape");
                if self.needs(b) {
                    self.accumulate(grads, b, ga.map(|v| -v));
                }
                self.accumulate(grads, a, ga);
            }
            Op::Ssim { a, b, window, c1, c2 } => {
                let (ga, gb) = self.ssim_backward(*a, *b, window, *c1, *c2, dy.item());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    let c = T::from_f64(c);
                    self.accumulate(grads, v, dy.map(|g| g * c));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4().expect("rank-4");
        let (cout, _, k, _) = self.value(w).dims4().expect("rank-4");
        let g = ConvGeometry { channels: cin, height: h, width: wd, kernel: k, stride, pad };
        let hwo = g.col_cols();
        let rows = g.col_rows();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let dyv = dy.data();
        let mut cols = vec![T::zero(); rows * hwo];
        let mut gw = self.needs(w).then(|| Tensor::zeros(self.value(w).shape()));
        let mut gx = self.needs(x).then(|| Tensor::zeros(self.value(x).shape()));
        for i in 0..n {
            let dyi = &dyv[i * cout * hwo..(i + 1) * cout * hwo];
            if let Some(gw) = gw.as_mut() {
                im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &g, &mut cols);
                gemm(cout, hwo, rows, dyi, false, &cols, true, T::one(), gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                gemm(rows, cout, hwo, wv, true, dyi, false, T::zero(), &mut cols);
                col2im_add(&cols, &g, &mut gx.data_mut()[i * cin * h * wd..(i + 1) * cin * h * wd]);
            }
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        if let Some(b) = b {
            if self.needs(b) {
                self.accumulate(grads, b, channel_sums(dy));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4().expect("rank-4");
        let (_, cout, k, _) = self.value(w).dims4().expect("rank-4");
        let (_, _, ho, wo) = dy.dims4().expect("rank-4");
        let g = ConvGeometry { channels: cout, height: ho, width: wo, kernel: k, stride, pad };
        let rows = g.col_rows();
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![T::zero(); rows * hw];
        let mut gw = self.needs(w).then(|| Tensor::zeros(self.value(w).shape()));
        let mut gx = self.needs(x).then(|| Tensor::zeros(self.value(x).shape()));
        for i in 0..n {
            im2col(&dy.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo], &g, &mut cols);
            if let Some(gw) = gw.as_mut() {
                let xi = &xv[i * cin * hw..(i + 1) * cin * hw];
                gemm(cin, hw, rows, xi, false, &cols, true, T::one(), gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
                gemm(cin, rows, hw, wv, false, &cols, false, T::zero(), dst);
            }
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        if let Some(b) = b {
            if self.needs(b) {
                self.accumulate(grads, b, channel_sums(dy));
            }
        }
    }

    fn ssim_backward(&self, a: Var, b: Var, window: &GaussianWindow, c1: f64, c2: f64, dy: T) -> (Tensor<T>, Tensor<T>) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, c, h, w) = ta.dims4().expect("rank-4");
        let k = window.size();
        let hw = h * w;
        let count = n * c * (h + 1 - k) * (w + 1 - k);
        let scale = dy / T::from_f64(count as f64);
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        let two = T::from_f64(2.0);
        let mut ga = Tensor::zeros(ta.shape());
        let mut gb = Tensor::zeros(tb.shape());
        for p in 0..n * c {
            let pa = &ta.data()[p * hw..(p + 1) * hw];
            let pb = &tb.data()[p * hw..(p + 1) * hw];
            let m = SsimMoments::compute(window, pa, pb, h, w);
            let len = m.len();
            let mut d_mu_a = vec![T::zero(); len];
            let mut d_mu_b = vec![T::zero(); len];
            let mut d_aa = vec![T::zero(); len];
            let mut d_bb = vec![T::zero(); len];
            let mut d_ab = vec![T::zero(); len];
            for i in 0..len {
                let (ma, mb) = (m.mu_a[i], m.mu_b[i]);
                let a1 = two * ma * mb + c1;
                let a2 = two * (m.e_ab[i] - ma * mb) + c2;
                let b1 = ma * ma + mb * mb + c1;
                let b2 = (m.e_aa[i] - ma * ma) + (m.e_bb[i] - mb * mb) + c2;
                let s = a1 * a2 / (b1 * b2);
                let common = two * (a2 - a1) / (b1 * b2);
                let diff = two * s * (T::one() / b1 - T::one() / b2);
                d_mu_a[i] = scale * (mb * common - ma * diff);
                d_mu_b[i] = scale * (ma * common - mb * diff);
                d_aa[i] = scale * (-s / b2);
                d_bb[i] = d_aa[i];
                d_ab[i] = scale * two * a1 / (b1 * b2);
            }
            let back = |v: &[T]| window.filter_valid_adjoint(v, h, w);
            let (bma, bmb, baa, bbb, bab) = (back(&d_mu_a), back(&d_mu_b), back(&d_aa), back(&d_bb), back(&d_ab));
            let ga_p = &mut ga.data_mut()[p * hw..(p + 1) * hw];
            for j in 0..hw {
                ga_p[j] = bma[j] + two * pa[j] * baa[j] + pb[j] * bab[j];
            }
            let gb_p = &mut gb.data_mut()[p * hw..(p + 1) * hw];
            for j in 0..hw {
                gb_p[j] = bmb[j] + two * pb[j] * bbb[j] + pa[j] * bab[j];
            }
        }
        (ga, gb)
    }
}

struct SsimMoments<T> {
    mu_a: Vec<T>,
    mu_b: Vec<T>,
    e_aa: Vec<T>,
    e_bb: Vec<T>,
    e_ab: Vec<T>,
}

impl<T: Real> SsimMoments<T> {
    fn compute(window: &GaussianWindow, a: &[T], b: &[T], h: usize, w: usize) -> Self {
        let sq = |x: &[T], y: &[T]| -> Vec<T> { x.iter().zip(y).map(|(&p, &q)| p * q).collect() };
        SsimMoments {
            mu_a: window.filter_valid(a, h, w),
            mu_b: window.filter_valid(b, h, w),
            e_aa: window.filter_valid(&sq(a, a), h, w),
            e_bb: window.filter_valid(&sq(b, b), h, w),
            e_ab: window.filter_valid(&sq(a, b), h, w),
        }
    }

    fn len(&self) -> usize {
        self.mu_a.len()
    }

    fn ssim_at(&self, i: usize, c1: f64, c2: f64) -> T {
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        let two = T::from_f64(2.0);
        let (ma, mb) = (self.mu_a[i], self.mu_b[i]);
        let num = (two * ma * mb + c1) * (two * (self.e_ab[i] - ma * mb) + c2);
        let den = (ma * ma + mb * mb + c1) * ((self.e_aa[i] - ma * ma) + (self.e_bb[i] - mb * mb) + c2);
        num / den
    }
}

fn add_channel_bias<T: Real>(out: &mut Tensor<T>, bias: &[T]) {
    let (_, c, h, w) = out.dims4().expect("rank-4");
    for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let bv = bias[p % c];
        for v in plane.iter_mut() {
            *v += bv;
        }
    }
}

fn channel_sums<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = dy.dims4().expect("rank-4");
    let mut g = Tensor::zeros(&[c]);
    for (p, plane) in dy.data().chunks(h * w).enumerate() {
        g.data_mut()[p % c] += plane.iter().copied().sum::<T>();
    }
    g
}

/// Gradients produced by one [`Graph::backward`] call.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
