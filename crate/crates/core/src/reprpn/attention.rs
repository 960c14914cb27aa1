//! Multi-head self-attention over a feature sequence.
//!
//! For each head `h` the layer computes `softmax(s * Q_h K_h^T) V_h` with
//! `Q = X W_Q`, `K = X W_K`, `V = X W_V`, concatenates the heads, and applies
//! an output projection. `s` is `1 / sqrt(d_head)` when scaling is on and 1
//! otherwise.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{Init, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic attention weights, one `(n, n)` matrix per head.
    pub weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
    scale: f64,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d: usize, heads: usize, init: Init) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} is not divisible by {heads} heads");
        AttentionParams {
            wq: init.sample(rng, (d, d), d),
            wk: init.sample(rng, (d, d), d),
            wv: init.sample(rng, (d, d), d),
            out: Linear::new(rng, d, d, init),
            heads,
        }
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.d() / self.heads
    }

    pub fn logit_scale(&self, scaled: bool) -> f64 {
        if scaled {
            1.0 / (self.d_head() as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// In-place row softmax.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Concatenated head outputs before the output projection.
pub fn attention_heads(x: &ArrayView2<f64>, p: &AttentionParams, scaled: bool) -> (Array2<f64>, AttentionCache) {
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let (n, d) = q.dim();
    let dh = p.d_head();
    let scale = p.logit_scale(scaled);
    let mut concat = Array2::<f64>::zeros((n, d));
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t());
        a *= scale;
        softmax_rows(&mut a);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    (concat.clone(), AttentionCache { q, k, v, weights, concat, scale })
}

pub fn attention_forward(x: &ArrayView2<f64>, p: &AttentionParams, scaled: bool) -> (Array2<f64>, AttentionCache) {
    let (concat, cache) = attention_heads(x, p, scaled);
    (p.out.forward(&concat.view()), cache)
}

/// Accumulates into `grad` and returns the gradient with respect to `x`.
pub fn attention_backward(
    x: &ArrayView2<f64>,
    p: &AttentionParams,
    cache: &AttentionCache,
    d_out: &Array2<f64>,
    grad: &mut AttentionParams,
) -> Array2<f64> {
    let d_concat = p.out.backward(&cache.concat.view(), d_out, &mut grad.out);
    let (n, d) = cache.q.dim();
    let dh = p.d_head();
    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_head = d_concat.slice(cols);
        let da = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&d_head));
        // softmax Jacobian, row by row
        let row_dot: Array1<f64> = (&da * a).sum_axis(Axis(1));
        let mut dlogits = &da - &row_dot.insert_axis(Axis(1));
        dlogits *= a;
        dlogits *= cache.scale;
        dq.slice_mut(cols).assign(&dlogits.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dlogits.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &x.t().dot(&dq);
    grad.wk += &x.t().dot(&dk);
    grad.wv += &x.t().dot(&dv);
    dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}
