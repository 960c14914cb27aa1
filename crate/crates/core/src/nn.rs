//! Dense building blocks with hand-written backward passes, parameter
//! bookkeeping, and the Adam optimizer.
//!
//! Feature maps are `(channels, height, width)` arrays; sequences are `(n, d)`.
//! Everything runs in `f64` so gradients can be checked against finite differences.

use ndarray::{s, Array, Array1, Array2, Array3, ArrayView2, Axis, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A borrowed, named view of one parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed, ordered collection of parameter tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same order.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<NamedTensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    /// Flat copy of every value, in enumeration order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

pub(crate) fn named<'a, D: Dimension>(prefix: &str, name: &str, a: &'a Array<f64, D>) -> NamedTensor<'a> {
    NamedTensor {
        name: if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") },
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    }
}

pub(crate) fn slice_mut<D: Dimension>(a: &mut Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

/// Weight initialization for trainable layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with standard deviation `gain / sqrt(fan_in)`.
    FanIn { gain: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::FanIn { gain: 1.0 }
    }
}

impl Init {
    pub fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::Gaussian { std } => std,
            Init::FanIn { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn sample<R: Rng + ?Sized, Sh: ndarray::ShapeBuilder>(
        &self,
        rng: &mut R,
        shape: Sh,
        fan_in: usize,
    ) -> Array<f64, Sh::Dim> {
        gaussian(rng, shape, self.std(fan_in))
    }
}

pub fn gaussian<R: Rng + ?Sized, Sh: ndarray::ShapeBuilder>(rng: &mut R, shape: Sh, std: f64) -> Array<f64, Sh::Dim> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let shape = shape.into_shape_with_order();
    let dim = shape.raw_dim().clone();
    let n = dim.size();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Array::from_shape_vec(dim, data).expect("size matches")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Convolution (odd square kernel, stride 1, "same" zero padding)

pub fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row-major");
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = (k / 2) as isize;
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                let src = src.as_slice().expect("row-major");
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// Square-kernel convolution layer. `weight` is `(out, in * k * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, init: Init) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: init.sample(rng, (c_out, fan_in), fan_in),
            bias: Array1::zeros(c_out),
            kernel,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c * self.kernel * self.kernel, self.weight.ncols(), "conv input channels");
        let cols = im2col(x, self.kernel);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.c_out(), h, w)).expect("conv output shape");
        (out, ConvCache { cols, in_dim: (c, h, w) })
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, d_out: &Array3<f64>, grad: &mut Conv2d) -> Array3<f64> {
        let (c, h, w) = cache.in_dim;
        let d = d_out.view().into_shape_with_order((self.c_out(), h * w)).expect("conv grad shape");
        grad.weight += &d.dot(&cache.cols.t());
        grad.bias += &d.sum_axis(Axis(1));
        let d_cols = self.weight.t().dot(&d);
        col2im(&d_cols, c, h, w, self.kernel)
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Passes the gradient where the forward output was positive.
pub fn relu_backward(out: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d = d_out.clone();
    ndarray::Zip::from(&mut d).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Non-overlapping average pooling with a square window; input sides must be multiples of `k`.
pub fn avg_pool(x: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    Array3::from_shape_fn((c, oh, ow), |(ci, y, xx)| {
        x.slice(s![ci, y * k..(y + 1) * k, xx * k..(xx + 1) * k]).sum() * inv
    })
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centers, clamped at the borders

#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

fn axis_taps(n_in: usize, n_out: usize) -> AxisTaps {
    let scale = n_in as f64 / n_out as f64;
    let mut taps = AxisTaps { lo: Vec::with_capacity(n_out), hi: Vec::with_capacity(n_out), t: Vec::with_capacity(n_out) };
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.t.push(src - lo as f64);
    }
    taps
}

pub fn resize_bilinear(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        let src = x.index_axis(Axis(0), ci);
        let mut dst = out.index_axis_mut(Axis(0), ci);
        for y in 0..oh {
            let (y0, y1, wy) = (ty.lo[y], ty.hi[y], ty.t[y]);
            for xx in 0..ow {
                let (x0, x1, wx) = (tx.lo[xx], tx.hi[xx], tx.t[xx]);
                let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
                let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
                dst[[y, xx]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(d_out: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = d_out.dim();
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let src = d_out.index_axis(Axis(0), ci);
        let mut dst = dx.index_axis_mut(Axis(0), ci);
        for y in 0..oh {
            let (y0, y1, wy) = (ty.lo[y], ty.hi[y], ty.t[y]);
            for xx in 0..ow {
                let (x0, x1, wx) = (tx.lo[xx], tx.hi[xx], tx.t[xx]);
                let g = src[[y, xx]];
                dst[[y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
                dst[[y0, x1]] += g * (1.0 - wy) * wx;
                dst[[y1, x0]] += g * wy * (1.0 - wx);
                dst[[y1, x1]] += g * wy * wx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Row-wise layer normalization

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::<f64>::zeros((n, d));
        let mut inv_std = Array1::<f64>::zeros(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, d_out: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let (n, d) = d_out.dim();
        grad.gamma += &(d_out * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &d_out.sum_axis(Axis(0));
        let dxhat = d_out * &self.gamma;
        let mut dx = Array2::<f64>::zeros((n, d));
        for r in 0..n {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let mean_g = g.sum() / d as f64;
            let mean_gx = g.dot(&xh) / d as f64;
            let is = cache.inv_std[r];
            for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = is * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

/// Affine map `x W + b` applied to each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, init: Init) -> Self {
        Linear { weight: init.sample(rng, (d_in, d_out), d_in), bias: Array1::zeros(d_out) }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &ArrayView2<f64>, d_out: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(d_out);
        grad.bias += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight.t())
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<P: ParamSet> {
    pub config: AdamConfig,
    step: u64,
    m: P,
    v: P,
}

impl<P: ParamSet> Adam<P> {
    pub fn new(config: AdamConfig, params: &P) -> Self {
        Adam { config, step: 0, m: params.zeroed(), v: params.zeroed() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let g = grads.tensors();
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Straight loop convolution used as the reference for the im2col path.
    fn conv_loops(x: &Array3<f64>, conv: &Conv2d) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel as isize;
        let p = k / 2;
        Array3::from_shape_fn((conv.c_out(), h, w), |(o, y, xx)| {
            let mut acc = conv.bias[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let (sy, sx) = (y as isize + ky - p, xx as isize + kx - p);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            let col = (ci * conv.kernel + ky as usize) * conv.kernel + kx as usize;
                            acc += conv.weight[[o, col]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_loops() {
        let mut r = rng();
        let mut conv = Conv2d::new(&mut r, 3, 4, 3, Init::default());
        conv.bias = gaussian(&mut r, 4, 1.0);
        let x = gaussian(&mut r, (3, 5, 6), 1.0);
        let (y, _) = conv.forward(&x);
        let reference = conv_loops(&x, &conv);
        for (a, b) in y.iter().zip(reference.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng();
        let conv = Conv2d::new(&mut r, 2, 3, 3, Init::default());
        let x = gaussian(&mut r, (2, 4, 5), 1.0);
        let probe = gaussian(&mut r, (3, 4, 5), 1.0);
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x).0 * &probe).sum();
        let (_, cache) = conv.forward(&x);
        let mut grad = Conv2d { weight: Array2::zeros(conv.weight.raw_dim()), bias: Array1::zeros(3), kernel: 3 };
        let dx = conv.backward(&cache, &probe, &mut grad);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx[idx], num, epsilon = 1e-7);
        }
        for idx in [(0, 0), (2, 17), (1, 9)] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert_abs_diff_eq!(grad.weight[idx], num, epsilon = 1e-7);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = gaussian(&mut rng(), (2, 3, 4), 1.0);
        assert_eq!(resize_bilinear(&x, 3, 4), x);
        let c = Array3::from_elem((1, 3, 3), 2.5);
        assert!(resize_bilinear(&c, 7, 5).iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut r = rng();
        let x = gaussian(&mut r, (2, 3, 5), 1.0);
        let g = gaussian(&mut r, (2, 8, 7), 1.0);
        let lhs = (resize_bilinear(&x, 8, 7) * &g).sum();
        let rhs = (resize_bilinear_backward(&g, 3, 5) * &x).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut r = rng();
        let mut ln = LayerNorm::new(6);
        ln.gamma = gaussian(&mut r, 6, 1.0);
        ln.beta = gaussian(&mut r, 6, 1.0);
        let x = gaussian(&mut r, (4, 6), 1.0);
        let probe = gaussian(&mut r, (4, 6), 1.0);
        let (_, cache) = ln.forward(&x);
        let mut grad = LayerNorm { gamma: Array1::zeros(6), beta: Array1::zeros(6) };
        let dx = ln.backward(&cache, &probe, &mut grad);
        let h = 1e-6;
        for idx in [(0, 0), (2, 3), (3, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = ((ln.forward(&xp).0 - ln.forward(&xm).0) * &probe).sum() / (2.0 * h);
            assert_abs_diff_eq!(dx[idx], num, epsilon = 1e-7);
        }
    }

    #[derive(Clone)]
    struct Quad {
        w: Array1<f64>,
    }

    impl ParamSet for Quad {
        fn tensors(&self) -> Vec<NamedTensor<'_>> {
            vec![named("", "w", &self.w)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![slice_mut(&mut self.w)]
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let target = Array1::from(vec![1.0, -2.0, 0.5]);
        let mut p = Quad { w: Array1::zeros(3) };
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..2000 {
            let g = Quad { w: 2.0 * (&p.w - &target) };
            opt.step(&mut p, &g);
        }
        for (a, b) in p.w.iter().zip(target.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Quad { w: Array1::zeros(2) };
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() }, &p);
        opt.step(&mut p, &Quad { w: Array1::from(vec![5.0, -0.01]) });
        assert_abs_diff_eq!(p.w[0], -1e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(p.w[1], 1e-3, epsilon = 1e-8);
    }
}
