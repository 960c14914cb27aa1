//! Counts one image with trained checkpoints and writes per-exemplar density
//! files and a side-by-side overlay.
//!
//! `cargo run --release --example predict_overlay -- <rpn.ckpt> <dpn.ckpt> [image.png] [out-dir]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repcount::data::{generate_scene, SceneSpec};
use repcount::pipeline::{write_prediction, Counter};

fn main() -> repcount::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [rpn, dpn, rest @ ..] = args.as_slice() else {
        eprintln!("usage: predict_overlay <rpn.ckpt> <dpn.ckpt> [image.png] [out-dir]");
        std::process::exit(1);
    };
    let counter = Counter::from_checkpoints(rpn.as_ref(), Some(dpn.as_ref()))?;
    let out_dir: PathBuf = rest.get(1).map_or_else(|| std::env::temp_dir().join("repcount-predict"), Into::into);
    let (path, image, truth) = match rest.first() {
        Some(p) => {
            let img = image::open(p).map_err(|e| repcount::Error::Image { path: p.into(), source: e })?.to_rgb8();
            (PathBuf::from(p), img, None)
        }
        None => {
            let scene = generate_scene(&SceneSpec::desk(), "scene", &mut ChaCha8Rng::seed_from_u64(11))?;
            (PathBuf::from("scene.png"), scene.image.clone(), Some(scene.gt_count()))
        }
    };
    let preds = counter.predict(&image, 3)?;
    let summary = write_prediction(&path, &image, &preds, &out_dir)?;
    if let Some(n) = truth {
        println!("ground truth {n}");
    }
    for e in &summary.exemplars {
        println!("box {:?} repetition {:.2} density count {:?}", e.bbox.as_array(), e.repetition, e.dpn_count);
    }
    println!("overlay {}", summary.overlay.display());
    Ok(())
}
