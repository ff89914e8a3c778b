//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order; [`Graph::backward`] walks them in
//! reverse and returns the adjoint of every node that depends on a leaf created
//! with `requires_grad = true`.

use crate::kernels::{self, Tap2};
use crate::tensor::{dims3, dims4, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy { x: Var, s: Var, idx: usize },
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    PowScalar(Var, f64),
    Clamp { x: Var, lo: f64, hi: f64 },
    Threshold { x: Var, tau: f64 },
    FakeQuant(Var),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    Index0 { x: Var, i: usize },
    Crop { x: Var, r0: usize, c0: usize },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    GridSample { src: Var, tt: Tap2, rows: Vec<Tap2>, cols: Vec<Tap2> },
    Resample { x: Var, rows: Vec<Tap2>, cols: Vec<Tap2> },
    PixelShuffle { x: Var, s: usize },
    AddTiled { x: Var, tile: Var, phase: (usize, usize) },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, g: Var, b: Var, eps: f64 },
    Depthwise { x: Var, k: Var, b: Option<Var>, ks: usize },
    Conv2d { x: Var, k: Var, b: Option<Var>, ks: usize },
    FilterValid { x: Var, g: Vec<f64> },
    FilterSame { x: Var, g: Vec<f64> },
    AvgPool2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads<T> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.g.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, or zeros of length `n` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<T> {
        self.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); n])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.g.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Copy of `v` that is cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn d(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cc = T::lit(c);
        self.unary(x, Op::MulScalar(x, c), |v| v * cc)
    }

    /// `s[idx] * x` where `s` is a tensor of scalars (e.g. window weights).
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let k = self.d(s)[idx];
        let value = self.nodes[x.0].value.map(|v| v * k);
        let ng = self.ng(&[x, s]);
        self.push(value, Op::ScaleBy { x, s, idx }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn pow_scalar(&mut self, x: Var, e: f64) -> Var {
        let ee = T::lit(e);
        self.unary(x, Op::PowScalar(x, e), |v| v.powf(ee))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(l).min(h))
    }

    /// Zero out entries whose magnitude is below `tau`.
    pub fn threshold(&mut self, x: Var, tau: f64) -> Var {
        let t = T::lit(tau);
        self.unary(x, Op::Threshold { x, tau }, |v| if v.abs() < t { T::zero() } else { v })
    }

    /// Symmetric per-tensor fake quantization with a straight-through adjoint.
    pub fn fake_quant(&mut self, x: Var, scale: f64, bits: u32) -> Var {
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let value = self.nodes[x.0].value.map(|v| T::lit(crate::codec::quant::fake_quant_value(v.f64(), scale, qmax)));
        let ng = self.ng(&[x]);
        self.push(value, Op::FakeQuant(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.d(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.d(x).len() as f64);
        let s: T = self.d(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), ng)
    }

    /// Mean over the spatial axes of `[h, w, c]`, giving `[c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        let mut acc = vec![T::zero(); c];
        for px in self.d(x).chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = T::lit((h * w) as f64);
        acc.iter_mut().for_each(|a| *a = *a / n);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c], acc), Op::MeanSpatial(x), ng)
    }

    pub fn index0(&mut self, x: Var, i: usize) -> Var {
        let value = self.nodes[x.0].value.index0(i);
        let ng = self.ng(&[x]);
        self.push(value, Op::Index0 { x, i }, ng)
    }

    pub fn crop(&mut self, x: Var, r0: usize, c0: usize, h: usize, w: usize) -> Var {
        let value = self.nodes[x.0].value.crop(r0, c0, h, w);
        let ng = self.ng(&[x]);
        self.push(value, Op::Crop { x, r0, c0 }, ng)
    }

    /// Concatenate along the trailing (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p.0].value.channels()).collect();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading shape mismatch");
        }
        let total: usize = widths.iter().sum();
        let npx: usize = lead.iter().product();
        let mut data = Vec::with_capacity(npx * total);
        for px in 0..npx {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.d(p)[px * w..(px + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        assert!(start + len <= c);
        let data = self
            .d(x)
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&shape, data), Op::SliceChannels { x, start }, ng)
    }

    /// Trilinear sample of a `[tj, hj, wj, c]` grid at temporal tap `tt`.
    pub fn grid_sample(&mut self, src: Var, tt: Tap2, rows: Vec<Tap2>, cols: Vec<Tap2>) -> Var {
        let dims = dims4(self.shape(src));
        let c = dims[3];
        let mut out = vec![T::zero(); rows.len() * cols.len() * c];
        kernels::grid_sample(self.d(src), dims, tt, &rows, &cols, &mut out);
        let value = Tensor::from_vec(&[rows.len(), cols.len(), c], out);
        let ng = self.ng(&[src]);
        self.push(value, Op::GridSample { src, tt, rows, cols }, ng)
    }

    /// Separable linear resampling of an `[h, w, c]` image.
    pub fn resample(&mut self, x: Var, rows: Vec<Tap2>, cols: Vec<Tap2>) -> Var {
        let [_, w, c] = dims3(self.shape(x));
        let out = kernels::resample(self.d(x), w, c, &rows, &cols);
        let value = Tensor::from_vec(&[rows.len(), cols.len(), c], out);
        let ng = self.ng(&[x]);
        self.push(value, Op::Resample { x, rows, cols }, ng)
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers.
    pub fn bilinear_up(&mut self, x: Var, s: usize) -> Var {
        let [h, w, _] = dims3(self.shape(x));
        self.resample(x, kernels::half_pixel_taps(h, s), kernels::half_pixel_taps(w, s))
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Var {
        let [h, w, cin] = dims3(self.shape(x));
        assert_eq!(cin % (s * s), 0, "pixel shuffle needs channels divisible by s^2");
        let c = cin / (s * s);
        let out = kernels::pixel_shuffle(self.d(x), h, w, c, s);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[h * s, w * s, c], out), Op::PixelShuffle { x, s }, ng)
    }

    /// Add a periodic `[s, s, c]` tile; pixel `(i, j)` takes tile entry
    /// `((i + phase.0) % s, (j + phase.1) % s)`.
    pub fn add_tiled(&mut self, x: Var, tile: Var, phase: (usize, usize)) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        let [s, s2, tc] = dims3(self.shape(tile));
        assert_eq!((s, tc), (s2, c), "tile shape mismatch");
        let (xd, td) = (self.d(x), self.d(tile));
        let mut out = xd.to_vec();
        for i in 0..h {
            let a = (i + phase.0) % s;
            for j in 0..w {
                let b = (j + phase.1) % s;
                let t = &td[(a * s + b) * c..(a * s + b + 1) * c];
                for (o, &tv) in out[(i * w + j) * c..(i * w + j + 1) * c].iter_mut().zip(t) {
                    *o += tv;
                }
            }
        }
        let ng = self.ng(&[x, tile]);
        self.push(Tensor::from_vec(&[h, w, c], out), Op::AddTiled { x, tile, phase }, ng)
    }

    /// Pointwise affine map; `w` is `[cin, cout]`, `b` is `[cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let [cin, cout] = [self.shape(w)[0], self.shape(w)[1]];
        assert_eq!(*xs.last().unwrap(), cin, "linear input width mismatch");
        let out = kernels::linear(self.d(x), self.d(w), b.map(|b| self.d(b)), cin, cout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let c = self.nodes[x.0].value.channels();
        let out = kernels::layer_norm(self.d(x), self.d(g), self.d(b), c, eps);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, g, b]);
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, g, b, eps }, ng)
    }

    /// Depthwise `ks x ks` convolution, kernel `[ks, ks, c]`, zero padding.
    pub fn depthwise(&mut self, x: Var, k: Var, b: Option<Var>) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        let ks = self.shape(k)[0];
        let out = kernels::depthwise(self.d(x), self.d(k), b.map(|b| self.d(b)), h, w, c, ks);
        let mut deps = vec![x, k];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_vec(&[h, w, c], out), Op::Depthwise { x, k, b, ks }, ng)
    }

    /// Dense convolution, kernel `[ks, ks, cin, cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Var {
        let [h, w, cin] = dims3(self.shape(x));
        let [ks, _, kin, cout] = dims4(self.shape(k));
        assert_eq!(kin, cin, "conv input width mismatch");
        let out = kernels::conv2d(self.d(x), self.d(k), b.map(|b| self.d(b)), h, w, cin, cout, ks);
        let mut deps = vec![x, k];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_vec(&[h, w, cout], out), Op::Conv2d { x, k, b, ks }, ng)
    }

    /// Separable fixed filter over the valid region.
    pub fn filter_valid(&mut self, x: Var, g: Vec<f64>) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        assert!(h >= g.len() && w >= g.len(), "image smaller than filter window");
        let out = kernels::filter_valid(self.d(x), h, w, c, &g);
        let shape = [h + 1 - g.len(), w + 1 - g.len(), c];
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&shape, out), Op::FilterValid { x, g }, ng)
    }

    /// Separable fixed filter with replicate padding.
    pub fn filter_same(&mut self, x: Var, g: Vec<f64>) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        let out = kernels::filter_same_replicate(self.d(x), h, w, c, &g);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[h, w, c], out), Op::FilterSame { x, g }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [h, w, c] = dims3(self.shape(x));
        let out = kernels::avg_pool2(self.d(x), h, w, c);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[h / 2, w / 2, c], out), Op::AvgPool2(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backprop(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Grads { g }
    }

    fn backprop(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Adjoint buffer for a parent, allocated on first use; None when the
        // parent does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(g[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        add_into(d, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    add_into(d, gout);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(gout).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.d(*a).to_vec(), self.d(*b).to_vec());
                if let Some(d) = acc!(*a) {
                    for k in 0..d.len() {
                        d[k] += gout[k] * vb[k];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for k in 0..d.len() {
                        d[k] += gout[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.d(*b).to_vec();
                if let Some(d) = acc!(*a) {
                    for k in 0..d.len() {
                        d[k] += gout[k] / vb[k];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for k in 0..d.len() {
                        d[k] -= gout[k] * out[k] / vb[k];
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(d) = acc!(*x) {
                    add_into(d, gout);
                }
            }
            Op::MulScalar(x, c) => {
                let c = T::lit(*c);
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(gout).for_each(|(d, &g)| *d += c * g);
                }
            }
            Op::ScaleBy { x, s, idx } => {
                let k = self.d(*s)[*idx];
                let xv: T = self.d(*x).iter().zip(gout).map(|(&a, &b)| a * b).sum();
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(gout).for_each(|(d, &g)| *d += k * g);
                }
                if let Some(d) = acc!(*s) {
                    d[*idx] += xv;
                }
            }
            Op::Abs(x) => {
                let xv = self.d(*x).to_vec();
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        d[k] += gout[k] * sign(xv[k]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.d(*x).to_vec();
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        if xv[k] > T::zero() {
                            d[k] += gout[k];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.d(*x).to_vec();
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        d[k] += gout[k] * kernels::gelu_grad(xv[k]);
                    }
                }
            }
            Op::PowScalar(x, e) => {
                let xv = self.d(*x).to_vec();
                let e1 = T::lit(*e - 1.0);
                let e = T::lit(*e);
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        if xv[k] != T::zero() {
                            d[k] += gout[k] * e * xv[k].powf(e1);
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.d(*x).to_vec();
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        if xv[k] >= lo && xv[k] <= hi {
                            d[k] += gout[k];
                        }
                    }
                }
            }
            Op::Threshold { x, tau } => {
                let xv = self.d(*x).to_vec();
                let t = T::lit(*tau);
                if let Some(d) = acc!(*x) {
                    for k in 0..d.len() {
                        if xv[k].abs() >= t {
                            d[k] += gout[k];
                        }
                    }
                }
            }
            Op::FakeQuant(x) => {
                if let Some(d) = acc!(*x) {
                    add_into(d, gout);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::lit(self.d(*x).len() as f64);
                if let Some(d) = acc!(*x) {
                    let gv = gout[0] / n;
                    d.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::MeanSpatial(x) => {
                let [h, w, c] = dims3(self.shape(*x));
                let n = T::lit((h * w) as f64);
                if let Some(d) = acc!(*x) {
                    for px in d.chunks_exact_mut(c) {
                        for (dv, &gv) in px.iter_mut().zip(gout) {
                            *dv += gv / n;
                        }
                    }
                }
            }
            Op::Index0 { x, i } => {
                let n = gout.len();
                if let Some(d) = acc!(*x) {
                    add_into(&mut d[i * n..(i + 1) * n], gout);
                }
            }
            Op::Crop { x, r0, c0 } => {
                let [_, iw, c] = dims3(self.shape(*x));
                let [h, w, _] = dims3(node.value.shape());
                if let Some(d) = acc!(*x) {
                    for r in 0..h {
                        let src = ((r0 + r) * iw + c0) * c;
                        add_into(&mut d[src..src + w * c], &gout[r * w * c..(r + 1) * w * c]);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.channels();
                let npx = gout.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.channels();
                    if let Some(d) = acc!(p) {
                        for px in 0..npx {
                            add_into(
                                &mut d[px * w..(px + 1) * w],
                                &gout[px * total + off..px * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceChannels { x, start } => {
                let c = self.nodes[x.0].value.channels();
                let len = node.value.channels();
                if let Some(d) = acc!(*x) {
                    for (px, gp) in gout.chunks_exact(len).enumerate() {
                        add_into(&mut d[px * c + start..px * c + start + len], gp);
                    }
                }
            }
            Op::GridSample { src, tt, rows, cols } => {
                let dims = dims4(self.shape(*src));
                if let Some(d) = acc!(*src) {
                    kernels::grid_sample_backward(d, dims, *tt, rows, cols, gout);
                }
            }
            Op::Resample { x, rows, cols } => {
                let [_, w, c] = dims3(self.shape(*x));
                if let Some(d) = acc!(*x) {
                    kernels::resample_backward(d, w, c, rows, cols, gout);
                }
            }
            Op::PixelShuffle { x, s } => {
                let [h, w, cin] = dims3(self.shape(*x));
                if let Some(d) = acc!(*x) {
                    kernels::pixel_shuffle_backward(d, h, w, cin / (s * s), *s, gout);
                }
            }
            Op::AddTiled { x, tile, phase } => {
                let [h, w, c] = dims3(node.value.shape());
                let s = self.shape(*tile)[0];
                if let Some(d) = acc!(*x) {
                    add_into(d, gout);
                }
                if let Some(d) = acc!(*tile) {
                    for i in 0..h {
                        let a = (i + phase.0) % s;
                        for j in 0..w {
                            let b = (j + phase.1) % s;
                            add_into(
                                &mut d[(a * s + b) * c..(a * s + b + 1) * c],
                                &gout[(i * w + j) * c..(i * w + j + 1) * c],
                            );
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let [cin, cout] = [self.shape(*w)[0], self.shape(*w)[1]];
                let (xv, wv) = (self.d(*x).to_vec(), self.d(*w).to_vec());
                if let Some(d) = acc!(*x) {
                    kernels::linear_backward(&xv, &wv, cin, cout, gout, Some(d), None, None);
                }
                if let Some(d) = acc!(*w) {
                    kernels::linear_backward(&xv, &wv, cin, cout, gout, None, Some(d), None);
                }
                if let Some(b) = b {
                    if let Some(d) = acc!(*b) {
                        kernels::linear_backward(&xv, &wv, cin, cout, gout, None, None, Some(d));
                    }
                }
            }
            Op::LayerNorm { x, g: gv, b, eps } => {
                let c = node.value.channels();
                let (xv, gam) = (self.d(*x).to_vec(), self.d(*gv).to_vec());
                if let Some(d) = acc!(*x) {
                    kernels::layer_norm_backward(&xv, &gam, c, *eps, gout, Some(d), None, None);
                }
                if let Some(d) = acc!(*gv) {
                    kernels::layer_norm_backward(&xv, &gam, c, *eps, gout, None, Some(d), None);
                }
                if let Some(d) = acc!(*b) {
                    kernels::layer_norm_backward(&xv, &gam, c, *eps, gout, None, None, Some(d));
                }
            }
            Op::Depthwise { x, k, b, ks } => {
                let [h, w, c] = dims3(self.shape(*x));
                let (xv, kv) = (self.d(*x).to_vec(), self.d(*k).to_vec());
                if let Some(d) = acc!(*x) {
                    kernels::depthwise_backward(&xv, &kv, h, w, c, *ks, gout, Some(d), None, None);
                }
                if let Some(d) = acc!(*k) {
                    kernels::depthwise_backward(&xv, &kv, h, w, c, *ks, gout, None, Some(d), None);
                }
                if let Some(b) = b {
                    if let Some(d) = acc!(*b) {
                        kernels::depthwise_backward(&xv, &kv, h, w, c, *ks, gout, None, None, Some(d));
                    }
                }
            }
            Op::Conv2d { x, k, b, ks } => {
                let [h, w, cin] = dims3(self.shape(*x));
                let cout = node.value.channels();
                let (xv, kv) = (self.d(*x).to_vec(), self.d(*k).to_vec());
                if let Some(d) = acc!(*x) {
                    kernels::conv2d_backward(&xv, &kv, h, w, cin, cout, *ks, gout, Some(d), None, None);
                }
                if let Some(d) = acc!(*k) {
                    kernels::conv2d_backward(&xv, &kv, h, w, cin, cout, *ks, gout, None, Some(d), None);
                }
                if let Some(b) = b {
                    if let Some(d) = acc!(*b) {
                        kernels::conv2d_backward(
                            &xv,
                            &kv,
                            h,
                            w,
                            cin,
                            cout,
                            *ks,
                            gout,
                            None,
                            None,
                            Some(d),
                        );
                    }
                }
            }
            Op::FilterValid { x, g: k } => {
                let [h, w, c] = dims3(self.shape(*x));
                if let Some(d) = acc!(*x) {
                    kernels::filter_valid_backward(d, h, w, c, k, gout);
                }
            }
            Op::FilterSame { x, g: k } => {
                let [h, w, c] = dims3(self.shape(*x));
                if let Some(d) = acc!(*x) {
                    kernels::filter_same_replicate_backward(d, h, w, c, k, gout);
                }
            }
            Op::AvgPool2(x) => {
                let [h, w, c] = dims3(self.shape(*x));
                if let Some(d) = acc!(*x) {
                    kernels::avg_pool2_backward(d, h, w, c, gout);
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (dv, &gv) in d.iter_mut().zip(g) {
        *dv += gv;
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
