//! Frozen convolutional backbone, row/column positional embeddings, and the
//! feature-map <-> sequence reshapes used around the attention encoder.

use image::RgbImage;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{avg_pool, relu, Conv2d, Init};
use crate::{Error, Result};

/// `(channels, rows, cols)` features of an image at a fixed pixel stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn hf(&self) -> usize {
        self.values.dim().1
    }

    pub fn wf(&self) -> usize {
        self.values.dim().2
    }
}

/// A feature extractor whose parameters are never trained.
///
/// Implement this to swap in a pretrained network.
pub trait Backbone: Send + Sync {
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> FeatureMap;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub seed: u64,
    /// Output channels of the three stages.
    pub channels: [usize; 3],
    /// Average-pool factor after each stage; their product is the stride.
    pub pools: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { seed: 0x5eed, channels: [16, 32, 64], pools: [4, 2, 2] }
    }
}

/// Three conv-ReLU-pool stages with seeded He-initialized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    stages: Vec<Conv2d>,
}

impl ToyBackbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut c_in = 3;
        let stages = config
            .channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(&mut rng, c_in, c, 3, Init::FanIn { gain: 2f64.sqrt() });
                c_in = c;
                conv
            })
            .collect();
        ToyBackbone { config, stages }
    }

    /// Parameter values, for asserting that nothing ever updates them.
    pub fn weights(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|c| c.weight.iter().chain(c.bias.iter()).copied()).collect()
    }
}

/// Converts to `(3, H, W)` with values centered on zero.
pub fn image_tensor(image: &RgbImage) -> Array3<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f64 / 255.0 - 0.5)
}

impl Backbone for ToyBackbone {
    fn stride(&self) -> usize {
        self.config.pools.iter().product()
    }

    fn out_channels(&self) -> usize {
        self.config.channels[2]
    }

    fn extract(&self, image: &RgbImage) -> FeatureMap {
        let stride = self.stride();
        let x = image_tensor(image);
        let (_, h, w) = x.dim();
        let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
        let mut padded = Array3::<f64>::zeros((3, ph, pw));
        padded.slice_mut(s![.., ..h, ..w]).assign(&x);
        let mut cur = padded;
        for (conv, &pool) in self.stages.iter().zip(&self.config.pools) {
            cur = avg_pool(&relu(&conv.forward(&cur).0), pool);
        }
        FeatureMap { values: cur, stride }
    }
}

fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// `(hf, wf, d)` embeddings: the first `d/2` components encode the row, the
/// last `d/2` the column.
pub fn positional_embeddings(hf: usize, wf: usize, d: usize) -> Result<Array3<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding width must be even, got {d}")));
    }
    let half = d / 2;
    let rows: Vec<Vec<f64>> = (0..hf).map(|r| sinusoid(r, half)).collect();
    let cols: Vec<Vec<f64>> = (0..wf).map(|c| sinusoid(c, half)).collect();
    Ok(Array3::from_shape_fn((hf, wf, d), |(r, c, k)| {
        if k < half {
            rows[r][k]
        } else {
            cols[c][k - half]
        }
    }))
}

/// Flattens `(C, hf, wf)` to `(hf * wf, C)` in row-major location order,
/// optionally maps channels through a fixed `(C, d)` projection, and adds `pos`.
pub fn to_sequence(fm: &FeatureMap, pos: &Array3<f64>, projection: Option<&Array2<f64>>) -> Result<Array2<f64>> {
    let (c, hf, wf) = fm.values.dim();
    let seq = fm
        .values
        .view()
        .into_shape_with_order((c, hf * wf))
        .expect("contiguous feature map")
        .t()
        .to_owned();
    let seq = match projection {
        Some(p) if p.nrows() != c => {
            return Err(Error::Shape(format!("projection expects {} channels, map has {c}", p.nrows())))
        }
        Some(p) => seq.dot(p),
        None => seq,
    };
    let (ph, pw, d) = pos.dim();
    if (ph, pw) != (hf, wf) || d != seq.ncols() {
        return Err(Error::Shape(format!(
            "positional embeddings {ph}x{pw}x{d} do not fit a {hf}x{wf} map of width {}",
            seq.ncols()
        )));
    }
    let pos = pos.view().into_shape_with_order((hf * wf, d)).expect("contiguous embeddings");
    Ok(seq + pos)
}

/// Inverse reshape of [`to_sequence`] (without the embedding): `(n, d)` to `(d, hf, wf)`.
pub fn from_sequence(u: &ArrayView2<f64>, hf: usize, wf: usize) -> Result<Array3<f64>> {
    let (n, d) = u.dim();
    if n != hf * wf {
        return Err(Error::Shape(format!("sequence of length {n} cannot fill a {hf}x{wf} map")));
    }
    let t = u.t().as_standard_layout().into_owned();
    Ok(t.into_shape_with_order((d, hf, wf)).expect("size checked"))
}

/// Summed absolute activation per channel, used by sanity checks.
pub fn feature_energy(fm: &FeatureMap) -> f64 {
    fm.values.map_axis(Axis(0), |v| v.iter().map(|x| x.abs()).sum::<f64>()).sum()
}
