//! Repetitive region proposal network.
//!
//! Backbone features are flattened into a sequence, offset by row/column
//! embeddings, passed through stacked self-attention, and decoded by three
//! 1x1 heads into per-anchor objectness logits, repetition scores, and box
//! deltas. Because every location attends to the whole image, the repetition
//! head can estimate how often the object under an anchor recurs.

pub mod attention;
pub mod encoder;
pub mod loss;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{from_sequence, positional_embeddings, to_sequence, FeatureMap};
use crate::geometry::{decode_box, nms, AnchorConfig, BBox, BoxDelta, Proposal, ScoreKey};
use crate::nn::{named, sigmoid, slice_mut, Init, Linear, NamedTensor, ParamSet};
use crate::{Error, Result};

pub use encoder::{EncoderLayer, EncoderOptions, FeedForward};
pub use loss::{reprpn_loss, smooth_l1, LossBreakdown, LossWeights};

/// Largest log-scale box delta applied when decoding proposals.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
/// Proposals narrower or shorter than this after clipping are dropped.
pub const MIN_PROPOSAL_SIDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepRpnConfig {
    /// Sequence width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Scale attention logits by `1/sqrt(d_head)`; off reproduces the unscaled formula.
    pub scaled_attention: bool,
    pub layer_norm: bool,
    /// Residual connections and feed-forward sublayers around each attention layer.
    pub transformer_standard: bool,
    pub anchors: AnchorConfig,
    pub init: Init,
    pub seed: u64,
}

impl Default for RepRpnConfig {
    fn default() -> Self {
        RepRpnConfig {
            d: 64,
            heads: 8,
            layers: 5,
            ffn_hidden: 128,
            scaled_attention: true,
            layer_norm: true,
            transformer_standard: false,
            anchors: AnchorConfig::default(),
            init: Init::default(),
            seed: 1,
        }
    }
}

impl RepRpnConfig {
    pub fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions {
            scaled_attention: self.scaled_attention,
            layer_norm: self.layer_norm,
            standard: self.transformer_standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("d must be even and positive, got {}", self.d)));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        self.anchors.validate()
    }
}

/// The three 1x1 prediction heads, applied per sequence row.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub objectness: Linear,
    pub repetition: Linear,
    pub boxes: Linear,
}

/// Raw head outputs for `n` locations and `k` anchors per location.
///
/// Anchor `i` lives at location `i / k`, slot `i % k`; its deltas occupy
/// columns `4 * slot .. 4 * slot + 4` of `deltas`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub logits: Array2<f64>,
    pub repetition: Array2<f64>,
    pub deltas: Array2<f64>,
}

impl HeadOutputs {
    pub fn per_location(&self) -> usize {
        self.logits.ncols()
    }

    pub fn num_anchors(&self) -> usize {
        self.logits.len()
    }

    pub fn zeros_like(&self) -> Self {
        HeadOutputs {
            logits: Array2::zeros(self.logits.raw_dim()),
            repetition: Array2::zeros(self.repetition.raw_dim()),
            deltas: Array2::zeros(self.deltas.raw_dim()),
        }
    }

    pub fn objectness(&self, anchor: usize) -> f64 {
        let k = self.per_location();
        sigmoid(self.logits[[anchor / k, anchor % k]])
    }

    pub fn repetition_score(&self, anchor: usize) -> f64 {
        let k = self.per_location();
        self.repetition[[anchor / k, anchor % k]]
    }

    pub fn delta(&self, anchor: usize) -> BoxDelta {
        let k = self.per_location();
        let (loc, a) = (anchor / k, anchor % k);
        let d = self.deltas.slice(s![loc, 4 * a..4 * a + 4]);
        BoxDelta { tx: d[0], ty: d[1], tw: d[2], th: d[3] }
    }
}

impl Heads {
    pub fn new<R: rand::Rng + ?Sized>(rng: &mut R, d: usize, k: usize, init: Init) -> Self {
        Heads {
            objectness: Linear::new(rng, d, k, init),
            repetition: Linear::new(rng, d, k, init),
            boxes: Linear::new(rng, d, 4 * k, init),
        }
    }

    pub fn forward(&self, u: &Array2<f64>) -> HeadOutputs {
        let u = u.view();
        HeadOutputs {
            logits: self.objectness.forward(&u),
            repetition: self.repetition.forward(&u),
            deltas: self.boxes.forward(&u),
        }
    }

    pub fn backward(&self, u: &Array2<f64>, d_out: &HeadOutputs, grad: &mut Heads) -> Array2<f64> {
        let u = u.view();
        self.objectness.backward(&u, &d_out.logits, &mut grad.objectness)
            + self.repetition.backward(&u, &d_out.repetition, &mut grad.repetition)
            + self.boxes.backward(&u, &d_out.deltas, &mut grad.boxes)
    }
}

/// Every trainable tensor of the proposal network.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRpnParams {
    pub layers: Vec<EncoderLayer>,
    pub heads: Heads,
}

fn push_linear<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: &str, l: &'a Linear) {
    out.push(named(prefix, "weight", &l.weight));
    out.push(named(prefix, "bias", &l.bias));
}

fn push_linear_mut<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
    out.push(slice_mut(&mut l.weight));
    out.push(slice_mut(&mut l.bias));
}

impl ParamSet for RepRpnParams {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.push(named(&p, "attn.wq", &l.attn.wq));
            out.push(named(&p, "attn.wk", &l.attn.wk));
            out.push(named(&p, "attn.wv", &l.attn.wv));
            push_linear(&mut out, &format!("{p}.attn.out"), &l.attn.out);
            if let Some(n) = &l.norm1 {
                out.push(named(&p, "norm1.gamma", &n.gamma));
                out.push(named(&p, "norm1.beta", &n.beta));
            }
            if let Some(f) = &l.ffn {
                push_linear(&mut out, &format!("{p}.ffn.up"), &f.up);
                push_linear(&mut out, &format!("{p}.ffn.down"), &f.down);
            }
            if let Some(n) = &l.norm2 {
                out.push(named(&p, "norm2.gamma", &n.gamma));
                out.push(named(&p, "norm2.beta", &n.beta));
            }
        }
        push_linear(&mut out, "heads.objectness", &self.heads.objectness);
        push_linear(&mut out, "heads.repetition", &self.heads.repetition);
        push_linear(&mut out, "heads.boxes", &self.heads.boxes);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(slice_mut(&mut l.attn.wq));
            out.push(slice_mut(&mut l.attn.wk));
            out.push(slice_mut(&mut l.attn.wv));
            push_linear_mut(&mut out, &mut l.attn.out);
            if let Some(n) = &mut l.norm1 {
                out.push(slice_mut(&mut n.gamma));
                out.push(slice_mut(&mut n.beta));
            }
            if let Some(f) = &mut l.ffn {
                push_linear_mut(&mut out, &mut f.up);
                push_linear_mut(&mut out, &mut f.down);
            }
            if let Some(n) = &mut l.norm2 {
                out.push(slice_mut(&mut n.gamma));
                out.push(slice_mut(&mut n.beta));
            }
        }
        push_linear_mut(&mut out, &mut self.heads.objectness);
        push_linear_mut(&mut out, &mut self.heads.repetition);
        push_linear_mut(&mut out, &mut self.heads.boxes);
        out
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct RpnForward {
    pub x: Array2<f64>,
    /// Encoder output sequence, `(hf * wf, d)`.
    pub u: Array2<f64>,
    pub outputs: HeadOutputs,
    pub hf: usize,
    pub wf: usize,
    caches: Vec<encoder::LayerCache>,
}

impl RpnForward {
    /// Attention weights of every layer and head.
    pub fn attention_weights(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.caches.iter().flat_map(|c| c.attn.weights.iter())
    }

    /// Encoder output reshaped to `(d, hf, wf)`.
    pub fn encoded_map(&self) -> Array3<f64> {
        from_sequence(&self.u.view(), self.hf, self.wf).expect("shape fixed at forward time")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRpn {
    pub config: RepRpnConfig,
    pub params: RepRpnParams,
    /// Fixed channel map applied when backbone channels differ from `d`.
    pub projection: Option<Array2<f64>>,
}

impl RepRpn {
    pub fn new(config: RepRpnConfig, feature_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let opts = config.encoder_options();
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(&mut rng, config.d, config.heads, config.ffn_hidden, opts, config.init))
            .collect();
        let heads = Heads::new(&mut rng, config.d, config.anchors.per_location(), config.init);
        let projection = (feature_channels != config.d).then(|| {
            let mut proj_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
            Init::FanIn { gain: 1.0 }.sample(&mut proj_rng, (feature_channels, config.d), feature_channels)
        });
        Ok(RepRpn { config, params: RepRpnParams { layers, heads }, projection })
    }

    pub fn per_location(&self) -> usize {
        self.config.anchors.per_location()
    }

    /// Sequence fed to the encoder: projected features plus positional embeddings.
    pub fn sequence(&self, fm: &FeatureMap) -> Result<Array2<f64>> {
        let pos = positional_embeddings(fm.hf(), fm.wf(), self.config.d)?;
        to_sequence(fm, &pos, self.projection.as_ref())
    }

    pub fn forward(&self, fm: &FeatureMap) -> Result<RpnForward> {
        let x = self.sequence(fm)?;
        Ok(self.forward_sequence(x, fm.hf(), fm.wf()))
    }

    pub fn forward_sequence(&self, x: Array2<f64>, hf: usize, wf: usize) -> RpnForward {
        let (u, caches) = encoder::encoder_forward(&self.params.layers, &x, self.config.encoder_options());
        let outputs = self.params.heads.forward(&u);
        RpnForward { x, u, outputs, hf, wf, caches }
    }

    /// Parameter gradients and the gradient with respect to the input sequence.
    pub fn backward(&self, fwd: &RpnForward, d_out: &HeadOutputs) -> (RepRpnParams, Array2<f64>) {
        let mut grad = self.params.zeroed();
        let d_u = self.params.heads.backward(&fwd.u, d_out, &mut grad.heads);
        let d_x = encoder::encoder_backward(&self.params.layers, &fwd.caches, &d_u, &mut grad.layers);
        (grad, d_x)
    }

    /// Decodes every anchor into a proposal clipped to the image.
    ///
    /// Degenerate boxes are dropped; repetition scores are clamped at zero.
    pub fn proposals(&self, outputs: &HeadOutputs, anchors: &[BBox], width: usize, height: usize) -> Vec<Proposal> {
        proposals_from_outputs(outputs, anchors, width, height)
    }
}

pub fn proposals_from_outputs(outputs: &HeadOutputs, anchors: &[BBox], width: usize, height: usize) -> Vec<Proposal> {
    assert_eq!(outputs.num_anchors(), anchors.len(), "one output per anchor");
    anchors
        .iter()
        .enumerate()
        .filter_map(|(i, anchor)| {
            let mut delta = outputs.delta(i);
            delta.tw = delta.tw.min(MAX_LOG_SCALE);
            delta.th = delta.th.min(MAX_LOG_SCALE);
            let bx = decode_box(&delta, anchor).clip(width as f64, height as f64)?;
            if bx.width() < MIN_PROPOSAL_SIDE || bx.height() < MIN_PROPOSAL_SIDE {
                return None;
            }
            Some(Proposal {
                bbox: bx,
                objectness: outputs.objectness(i),
                repetition: outputs.repetition_score(i).max(0.0),
                anchor_index: i,
            })
        })
        .collect()
}

/// Non-maximum suppression on `key`, then the `top_k` best survivors in
/// descending order. Repetition is the key the counter uses; objectness gives
/// the plain-RPN selection.
pub fn select_exemplars(proposals: &[Proposal], top_k: usize, nms_thresh: f64, key: ScoreKey) -> Vec<Proposal> {
    let mut kept = nms(proposals, nms_thresh, key);
    kept.truncate(top_k);
    kept
}
