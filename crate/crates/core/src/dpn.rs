//! Density prediction network.
//!
//! An exemplar box is ROI-pooled from the image features into a small
//! `C x P x P` kernel, slid over the feature map to produce a correlation map,
//! and decoded by five 3x3 convolutions with three x2 bilinear upsamplings into
//! a density map the size of the input image. The count for the exemplar is
//! the sum of that map.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::features::FeatureMap;
use crate::geometry::BBox;
use crate::nn::{col2im, im2col, named, relu, relu_backward, resize_bilinear, resize_bilinear_backward, slice_mut, Conv2d, ConvCache, Init, NamedTensor, ParamSet};
use crate::{Error, Result};

/// Pooled exemplar features, `(C, P, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarFeature {
    pub pooled: Array3<f64>,
}

/// Which features the exemplar is correlated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationSource {
    /// Frozen backbone features.
    #[default]
    Backbone,
    /// Attention-encoder output of the proposal network.
    Encoder,
}

/// Nonlinearity after the last convolution. Both keep densities non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Hard clamp at zero. Can stop learning once every output is clamped.
    Relu,
    /// `ln(1 + e^x)`; never saturates to a zero gradient.
    #[default]
    Softplus,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpnConfig {
    /// Output channels of the first four convolutions; the fifth outputs one channel.
    pub channels: [usize; 4],
    pub roi_size: usize,
    pub output: OutputActivation,
    /// Divide correlation maps by the exemplar's correlation with itself, so
    /// a perfect match scores about 1 whatever the object's brightness.
    pub self_normalize: bool,
    /// Subtract each channel's spatial mean from the feature maps before
    /// pooling and correlating, so uniform background does not match.
    pub center: bool,
    pub correlation_source: CorrelationSource,
    /// Defaults to twice the fan-in scale: near-empty correlation maps
    /// otherwise leave the stack dead after the first few updates.
    pub init: Init,
    pub seed: u64,
}

impl Default for DpnConfig {
    fn default() -> Self {
        DpnConfig {
            channels: [32, 32, 16, 16],
            roi_size: 3,
            output: OutputActivation::Softplus,
            self_normalize: true,
            center: true,
            correlation_source: CorrelationSource::Backbone,
            init: Init::FanIn { gain: 2.0 },
            seed: 2,
        }
    }
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

/// Bilinear tap at continuous feature coordinate `f` (cell `i` centered on `i + 0.5`).
fn tap(f: f64, n: usize) -> Tap {
    let u = (f - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = u.floor() as usize;
    Tap { lo, hi: (lo + 1).min(n - 1), t: u - lo as f64 }
}

fn roi_taps(fm: &FeatureMap, bx: &BBox, p: usize) -> (Vec<Tap>, Vec<Tap>) {
    let s = fm.stride as f64;
    let (x1, y1, x2, y2) = (bx.x1 / s, bx.y1 / s, bx.x2 / s, bx.y2 / s);
    let xs = (0..p).map(|j| tap(x1 + (j as f64 + 0.5) * (x2 - x1) / p as f64, fm.wf())).collect();
    let ys = (0..p).map(|i| tap(y1 + (i as f64 + 0.5) * (y2 - y1) / p as f64, fm.hf())).collect();
    (ys, xs)
}

/// Samples a `p x p` grid of bin centers inside the box, bilinearly, per channel.
pub fn roi_pool(fm: &FeatureMap, bx: &BBox, p: usize) -> ExemplarFeature {
    assert!(p >= 1, "ROI output size must be positive");
    let (ys, xs) = roi_taps(fm, bx, p);
    let v = &fm.values;
    let pooled = Array3::from_shape_fn((fm.channels(), p, p), |(c, i, j)| {
        let (ty, tx) = (ys[i], xs[j]);
        let top = v[[c, ty.lo, tx.lo]] * (1.0 - tx.t) + v[[c, ty.lo, tx.hi]] * tx.t;
        let bot = v[[c, ty.hi, tx.lo]] * (1.0 - tx.t) + v[[c, ty.hi, tx.hi]] * tx.t;
        top * (1.0 - ty.t) + bot * ty.t
    });
    ExemplarFeature { pooled }
}

/// Gradient of [`roi_pool`] with respect to the feature map values.
pub fn roi_pool_backward(fm: &FeatureMap, bx: &BBox, d_pooled: &Array3<f64>) -> Array3<f64> {
    let p = d_pooled.dim().1;
    let (ys, xs) = roi_taps(fm, bx, p);
    let mut d = Array3::<f64>::zeros(fm.values.raw_dim());
    for ((c, i, j), &g) in d_pooled.indexed_iter() {
        let (ty, tx) = (ys[i], xs[j]);
        d[[c, ty.lo, tx.lo]] += g * (1.0 - ty.t) * (1.0 - tx.t);
        d[[c, ty.lo, tx.hi]] += g * (1.0 - ty.t) * tx.t;
        d[[c, ty.hi, tx.lo]] += g * ty.t * (1.0 - tx.t);
        d[[c, ty.hi, tx.hi]] += g * ty.t * tx.t;
    }
    d
}

/// Slides the exemplar over the map with zero padding, summing over channels,
/// normalized by `C * P^2`. Output is `(hf, wf)`.
pub fn correlate(fm: &FeatureMap, ex: &ExemplarFeature) -> Result<Array2<f64>> {
    let (c, p, _) = ex.pooled.dim();
    if c != fm.channels() {
        return Err(Error::Shape(format!("exemplar has {c} channels, feature map has {}", fm.channels())));
    }
    let cols = im2col(&fm.values, p);
    let kernel = ex.pooled.view().into_shape_with_order(c * p * p).expect("contiguous exemplar");
    let out = kernel.dot(&cols) / (c * p * p) as f64;
    Ok(out.into_shape_with_order((fm.hf(), fm.wf())).expect("one value per cell"))
}

/// Copy of `fm` with every channel shifted to zero spatial mean.
pub fn center_channels(fm: &FeatureMap) -> FeatureMap {
    let mut values = fm.values.clone();
    for mut ch in values.outer_iter_mut() {
        let m = ch.mean().unwrap_or(0.0);
        ch.mapv_inplace(|v| v - m);
    }
    FeatureMap { values, stride: fm.stride }
}

/// The exemplar's correlation with itself, `sum(ex^2) / (C * P^2)`.
pub fn self_correlation(ex: &ExemplarFeature) -> f64 {
    ex.pooled.iter().map(|v| v * v).sum::<f64>() / ex.pooled.len() as f64
}

/// Gradients of [`correlate`] with respect to the feature map and the exemplar.
pub fn correlate_backward(fm: &FeatureMap, ex: &ExemplarFeature, d_out: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
    let (c, p, _) = ex.pooled.dim();
    let norm = 1.0 / (c * p * p) as f64;
    let cols = im2col(&fm.values, p);
    let d = d_out.view().into_shape_with_order((1, fm.hf() * fm.wf())).expect("contiguous gradient");
    let d_kernel = d.dot(&cols.t()) * norm;
    let kernel = ex.pooled.view().into_shape_with_order((c * p * p, 1)).expect("contiguous exemplar");
    let d_cols = kernel.dot(&d) * norm;
    let d_fm = col2im(&d_cols, c, fm.hf(), fm.wf(), p);
    (d_fm, d_kernel.into_shape_with_order((c, p, p)).expect("kernel shape"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpnParams {
    pub convs: Vec<Conv2d>,
}

impl ParamSet for DpnParams {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let p = format!("conv{i}");
            out.push(named(&p, "weight", &c.weight));
            out.push(named(&p, "bias", &c.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(slice_mut(&mut c.weight));
            out.push(slice_mut(&mut c.bias));
        }
        out
    }
}

/// Number of convolutions followed by a x2 upsampling.
const UPSAMPLED_STAGES: usize = 3;

pub struct DpnForward {
    pub density: DensityMap,
    input: Array3<f64>,
    /// Per conv: cache and post-activation output.
    stages: Vec<(ConvCache, Array3<f64>)>,
    /// Pre-activation of the last convolution.
    last_pre: Array3<f64>,
    conv_inputs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dpn {
    pub config: DpnConfig,
    pub params: DpnParams,
}

impl Dpn {
    pub fn new(config: DpnConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut c_in = 1;
        let mut convs = Vec::with_capacity(5);
        for &c in config.channels.iter().chain(std::iter::once(&1)) {
            convs.push(Conv2d::new(&mut rng, c_in, c, 3, config.init));
            c_in = c;
        }
        convs[4].bias = Array1::from_elem(1, match config.output {
            // a negative start would silence the clamp
            OutputActivation::Relu => 1e-3,
            // softplus(-6) ~ 2.5e-3 per pixel: near-empty maps, as targets mostly are
            OutputActivation::Softplus => -6.0,
        });
        Dpn { config, params: DpnParams { convs } }
    }

    pub fn exemplar_feature(&self, fm: &FeatureMap, bx: &BBox) -> ExemplarFeature {
        roi_pool(fm, bx, self.config.roi_size)
    }

    /// Correlation map for an exemplar. `image_side` is the map the exemplar
    /// is slid over; the exemplar itself is always pooled from `backbone`.
    pub fn correlation(&self, backbone: &FeatureMap, image_side: &FeatureMap, bx: &BBox) -> Result<Array2<f64>> {
        correlate(image_side, &self.exemplar_feature(backbone, bx))
    }

    pub fn forward(&self, corr: &Array2<f64>, image_h: usize, image_w: usize) -> DpnForward {
        let input = corr.clone().insert_axis(Axis(0));
        let mut cur = input.clone();
        let mut stages = Vec::with_capacity(self.params.convs.len());
        let mut conv_inputs = Vec::with_capacity(self.params.convs.len());
        let last = self.params.convs.len() - 1;
        let mut last_pre = Array3::zeros((0, 0, 0));
        for (i, conv) in self.params.convs.iter().enumerate() {
            conv_inputs.push((cur.dim().1, cur.dim().2));
            let (z, cache) = conv.forward(&cur);
            let a = if i == last && self.config.output == OutputActivation::Softplus { z.mapv(softplus) } else { relu(&z) };
            if i == last {
                last_pre = z;
            }
            cur = if i < UPSAMPLED_STAGES {
                let (_, h, w) = a.dim();
                resize_bilinear(&a, 2 * h, 2 * w)
            } else {
                a.clone()
            };
            stages.push((cache, a));
        }
        let out = resize_bilinear(&cur, image_h, image_w);
        let values = out.index_axis_move(Axis(0), 0);
        DpnForward { density: DensityMap { values }, input, stages, last_pre, conv_inputs }
    }

    /// Parameter gradients and the gradient with respect to the correlation map.
    pub fn backward(&self, fwd: &DpnForward, d_density: &Array2<f64>) -> (DpnParams, Array2<f64>) {
        let mut grad = self.params.zeroed();
        let last = fwd.stages.len() - 1;
        let (lh, lw) = (fwd.stages[last].1.dim().1, fwd.stages[last].1.dim().2);
        let mut d = resize_bilinear_backward(&d_density.clone().insert_axis(Axis(0)), lh, lw);
        for i in (0..self.params.convs.len()).rev() {
            let (cache, act) = &fwd.stages[i];
            if i < UPSAMPLED_STAGES {
                d = resize_bilinear_backward(&d, act.dim().1, act.dim().2);
            }
            let dz = if i == last && self.config.output == OutputActivation::Softplus {
                &d * &fwd.last_pre.mapv(crate::nn::sigmoid)
            } else {
                relu_backward(act, &d)
            };
            d = self.params.convs[i].backward(cache, &dz, &mut grad.convs[i]);
            debug_assert_eq!((d.dim().1, d.dim().2), fwd.conv_inputs[i]);
        }
        debug_assert_eq!(d.dim(), fwd.input.dim());
        (grad, d.index_axis_move(Axis(0), 0))
    }
}

/// Mean squared error over all pixels, with its gradient with respect to `z`.
pub fn mse_loss(z: &DensityMap, z_star: &DensityMap) -> Result<(f64, Array2<f64>)> {
    if z.shape() != z_star.shape() {
        return Err(Error::Shape(format!("density {:?} vs target {:?}", z.shape(), z_star.shape())));
    }
    let n = z.values.len() as f64;
    let diff = &z.values - &z_star.values;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use approx::assert_abs_diff_eq;

    fn random_fm(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        FeatureMap { values: gaussian(&mut ChaCha8Rng::seed_from_u64(seed), (c, h, w), 1.0), stride: 16 }
    }

    #[test]
    fn roi_pool_identity_on_full_box() {
        let fm = random_fm(3, 4, 4, 1);
        let ex = roi_pool(&fm, &BBox::new(0.0, 0.0, 64.0, 64.0), 4);
        for (a, b) in ex.pooled.iter().zip(fm.values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn roi_pool_of_constant_map_is_constant() {
        let fm = FeatureMap { values: Array3::from_elem((2, 5, 6), 0.75), stride: 8 };
        let ex = roi_pool(&fm, &BBox::new(3.0, 7.0, 21.5, 30.0), 3);
        assert!(ex.pooled.iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn roi_pool_single_cell() {
        let values = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fm = FeatureMap { values, stride: 16 };
        let ex = roi_pool(&fm, &BBox::new(0.0, 0.0, 16.0, 16.0), 1);
        assert_eq!(ex.pooled[[0, 0, 0]], 1.0);
        // a box centered on the corner shared by all four cells averages them
        let mid = roi_pool(&fm, &BBox::new(8.0, 8.0, 24.0, 24.0), 1);
        assert_abs_diff_eq!(mid.pooled[[0, 0, 0]], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn roi_pool_backward_is_adjoint() {
        let fm = random_fm(2, 5, 5, 2);
        let bx = BBox::new(5.0, 9.0, 60.0, 41.0);
        let g = gaussian(&mut ChaCha8Rng::seed_from_u64(3), (2, 3, 3), 1.0);
        let lhs = (roi_pool(&fm, &bx, 3).pooled * &g).sum();
        let rhs = (roi_pool_backward(&fm, &bx, &g) * &fm.values).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    /// Triple-loop sliding window.
    fn correlate_loops(fm: &FeatureMap, ex: &ExemplarFeature) -> Array2<f64> {
        let (c, p, _) = ex.pooled.dim();
        let off = (p / 2) as isize;
        Array2::from_shape_fn((fm.hf(), fm.wf()), |(y, x)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        let (sy, sx) = (y as isize + i as isize - off, x as isize + j as isize - off);
                        if sy >= 0 && sx >= 0 && (sy as usize) < fm.hf() && (sx as usize) < fm.wf() {
                            acc += fm.values[[ci, sy as usize, sx as usize]] * ex.pooled[[ci, i, j]];
                        }
                    }
                }
            }
            acc / (c * p * p) as f64
        })
    }

    #[test]
    fn correlate_matches_sliding_window() {
        let fm = random_fm(4, 8, 8, 4);
        for p in [1, 2, 3] {
            let ex = ExemplarFeature { pooled: gaussian(&mut ChaCha8Rng::seed_from_u64(5), (4, p, p), 1.0) };
            let fast = correlate(&fm, &ex).unwrap();
            for (a, b) in fast.iter().zip(correlate_loops(&fm, &ex).iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correlate_peaks_at_the_source_location() {
        let fm = random_fm(16, 8, 8, 6);
        // exemplar covering cells (2..5, 4..7), centered on cell (3, 5)
        let ex = roi_pool(&fm, &BBox::new(64.0, 32.0, 112.0, 80.0), 3);
        let corr = correlate(&fm, &ex).unwrap();
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for ((y, x), v) in corr.indexed_iter() {
            if *v > best {
                best = *v;
                at = (y, x);
            }
        }
        assert_eq!(at, (3, 5));
    }

    #[test]
    fn correlate_edge_cases() {
        let fm = random_fm(3, 5, 5, 7);
        let zero = ExemplarFeature { pooled: Array3::zeros((3, 3, 3)) };
        assert!(correlate(&fm, &zero).unwrap().iter().all(|v| *v == 0.0));

        let ones = FeatureMap { values: Array3::ones((3, 5, 5)), stride: 16 };
        let ex = ExemplarFeature { pooled: Array3::ones((3, 3, 3)) };
        let corr = correlate(&ones, &ex).unwrap();
        assert_abs_diff_eq!(corr[[2, 2]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(corr[[0, 0]], 4.0 / 9.0, epsilon = 1e-12);

        let wrong = ExemplarFeature { pooled: Array3::ones((2, 3, 3)) };
        assert!(matches!(correlate(&fm, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn correlate_backward_is_adjoint() {
        let fm = random_fm(3, 6, 5, 8);
        let ex = ExemplarFeature { pooled: gaussian(&mut ChaCha8Rng::seed_from_u64(9), (3, 3, 3), 1.0) };
        let g = gaussian(&mut ChaCha8Rng::seed_from_u64(10), (6, 5), 1.0);
        let (d_fm, d_ex) = correlate_backward(&fm, &ex, &g);
        let base = (correlate(&fm, &ex).unwrap() * &g).sum();
        assert_abs_diff_eq!((&d_fm * &fm.values).sum(), base, epsilon = 1e-10);
        assert_abs_diff_eq!((&d_ex * &ex.pooled).sum(), base, epsilon = 1e-10);
    }

    #[test]
    fn output_matches_image_shape_and_is_non_negative() {
        let dpn = Dpn::new(DpnConfig::default());
        let corr = gaussian(&mut ChaCha8Rng::seed_from_u64(11), (4, 4), 1.0);
        let out = dpn.forward(&corr, 64, 64);
        assert_eq!(out.density.shape(), (64, 64));
        assert!(out.density.values.iter().all(|v| *v >= 0.0));
        assert_eq!(dpn.forward(&corr, 61, 50).density.shape(), (61, 50));
    }

    #[test]
    fn mse_fixtures() {
        let a = DensityMap::zeros(2, 2);
        let b = DensityMap { values: Array2::ones((2, 2)) };
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let (l, g) = mse_loss(&b, &a).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.iter().all(|v| *v == 0.5));
        assert!(mse_loss(&a, &DensityMap::zeros(2, 3)).is_err());
    }
}
