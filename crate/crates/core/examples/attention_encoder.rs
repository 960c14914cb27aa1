//! Runs a scene through the frozen backbone and the self-attention encoder,
//! then checks the attention weights and permutation equivariance.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repcount::data::{generate_scene, SceneSpec};
use repcount::features::{positional_embeddings, to_sequence, Backbone, BackboneConfig, ToyBackbone};
use repcount::nn::Init;
use repcount::reprpn::attention::{attention_forward, AttentionParams};
use repcount::reprpn::{RepRpn, RepRpnConfig};

fn main() -> repcount::Result<()> {
    let scene = generate_scene(&SceneSpec::single_class(128, (8, 12), (18.0, 26.0)), "scene", &mut ChaCha8Rng::seed_from_u64(5))?;
    let backbone = ToyBackbone::new(BackboneConfig::default());
    let fm = backbone.extract(&scene.image);
    println!("feature map {:?} at stride {}", fm.values.dim(), fm.stride);

    let pos = positional_embeddings(fm.hf(), fm.wf(), 64)?;
    let seq = to_sequence(&fm, &pos, None)?;
    println!("sequence {:?}", seq.dim());

    let rpn = RepRpn::new(RepRpnConfig::default(), backbone.out_channels())?;
    let fwd = rpn.forward(&fm)?;
    let worst = fwd
        .attention_weights()
        .flat_map(|w| w.sum_axis(Axis(1)).into_iter())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    println!("{} attention maps, worst row-sum error {worst:.2e}", fwd.attention_weights().count());
    println!("encoded map {:?}", fwd.encoded_map().dim());

    // permuting the tokens permutes the output the same way
    let p = AttentionParams::new(&mut ChaCha8Rng::seed_from_u64(9), 64, 8, Init::default());
    let (y, _) = attention_forward(&seq.view(), &p, true);
    let perm: Vec<usize> = (0..seq.nrows()).rev().collect();
    let (y_perm, _) = attention_forward(&seq.select(Axis(0), &perm).view(), &p, true);
    let diff: Array2<f64> = &y.select(Axis(0), &perm) - &y_perm;
    println!("permutation equivariance error {:.2e}", diff.mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    Ok(())
}
