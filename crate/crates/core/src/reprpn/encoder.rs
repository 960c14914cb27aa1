//! Stacked self-attention layers.
//!
//! Two layer variants are supported:
//!
//! * plain: `y = LN(MHA(x))`, or just `MHA(x)` with layer norm disabled;
//! * standard transformer (post-norm): `h = LN(x + MHA(x))`, `y = LN(h + FFN(h))`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};
use crate::nn::{Init, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderOptions {
    pub scaled_attention: bool,
    pub layer_norm: bool,
    pub standard: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
    pub norm2: Option<LayerNorm>,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d: usize, heads: usize, ffn_hidden: usize, opts: EncoderOptions, init: Init) -> Self {
        let attn = AttentionParams::new(rng, d, heads, init);
        if opts.standard {
            let ffn = FeedForward { up: Linear::new(rng, d, ffn_hidden, init), down: Linear::new(rng, ffn_hidden, d, init) };
            EncoderLayer { attn, norm1: Some(LayerNorm::new(d)), ffn: Some(ffn), norm2: Some(LayerNorm::new(d)) }
        } else {
            EncoderLayer { attn, norm1: opts.layer_norm.then(|| LayerNorm::new(d)), ffn: None, norm2: None }
        }
    }
}

pub struct LayerCache {
    input: Array2<f64>,
    pub attn: AttentionCache,
    norm1: Option<LayerNormCache>,
    /// FFN input, pre-activation hidden, and norm2 cache (standard layers only).
    ffn: Option<(Array2<f64>, Array2<f64>, LayerNormCache)>,
}

pub fn layer_forward(layer: &EncoderLayer, x: &Array2<f64>, opts: EncoderOptions) -> (Array2<f64>, LayerCache) {
    let (a, attn) = attention_forward(&x.view(), &layer.attn, opts.scaled_attention);
    if let (Some(ffn), Some(n1), Some(n2)) = (&layer.ffn, &layer.norm1, &layer.norm2) {
        let (h, c1) = n1.forward(&(x + &a));
        let pre = ffn.up.forward(&h.view());
        let hidden = pre.mapv(|v| v.max(0.0));
        let f = ffn.down.forward(&hidden.view());
        let (y, c2) = n2.forward(&(&h + &f));
        let cache = LayerCache { input: x.clone(), attn, norm1: Some(c1), ffn: Some((h, pre, c2)) };
        (y, cache)
    } else if let Some(n1) = &layer.norm1 {
        let (y, c1) = n1.forward(&a);
        (y, LayerCache { input: x.clone(), attn, norm1: Some(c1), ffn: None })
    } else {
        (a, LayerCache { input: x.clone(), attn, norm1: None, ffn: None })
    }
}

pub fn layer_backward(layer: &EncoderLayer, cache: &LayerCache, d_out: &Array2<f64>, grad: &mut EncoderLayer) -> Array2<f64> {
    let x: ArrayView2<f64> = cache.input.view();
    if let (Some(ffn), Some(n1), Some(n2), Some((h, pre, c2))) = (&layer.ffn, &layer.norm1, &layer.norm2, &cache.ffn) {
        let g_ffn = grad.ffn.as_mut().expect("gradient layout matches");
        let d_sum2 = n2.backward(c2, d_out, grad.norm2.as_mut().expect("gradient layout matches"));
        let hidden = pre.mapv(|v| v.max(0.0));
        let mut d_hidden = ffn.down.backward(&hidden.view(), &d_sum2, &mut g_ffn.down);
        ndarray::Zip::from(&mut d_hidden).and(pre).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let d_h = &d_sum2 + &ffn.up.backward(&h.view(), &d_hidden, &mut g_ffn.up);
        let c1 = cache.norm1.as_ref().expect("standard layer caches norm1");
        let d_sum1 = n1.backward(c1, &d_h, grad.norm1.as_mut().expect("gradient layout matches"));
        &d_sum1 + &attention_backward(&x, &layer.attn, &cache.attn, &d_sum1, &mut grad.attn)
    } else if let (Some(n1), Some(c1)) = (&layer.norm1, &cache.norm1) {
        let d_a = n1.backward(c1, d_out, grad.norm1.as_mut().expect("gradient layout matches"));
        attention_backward(&x, &layer.attn, &cache.attn, &d_a, &mut grad.attn)
    } else {
        attention_backward(&x, &layer.attn, &cache.attn, d_out, &mut grad.attn)
    }
}

pub fn encoder_forward(layers: &[EncoderLayer], x: &Array2<f64>, opts: EncoderOptions) -> (Array2<f64>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (y, c) = layer_forward(layer, &cur, opts);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

pub fn encoder_backward(layers: &[EncoderLayer], caches: &[LayerCache], d_out: &Array2<f64>, grads: &mut [EncoderLayer]) -> Array2<f64> {
    let mut d = d_out.clone();
    for ((layer, cache), grad) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = layer_backward(layer, cache, &d, grad);
    }
    d
}
