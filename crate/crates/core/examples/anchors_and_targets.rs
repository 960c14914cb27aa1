//! Tiles anchors over a feature grid, labels them against annotated boxes,
//! and lets the oracle teacher fill in anchors on the unannotated class.

use repcount::data::{generate_scene, ClassSpec, SceneSpec};
use repcount::geometry::{assign_anchor_targets, decode_box, encode_box, generate_anchors, iou, AnchorConfig, AnchorLabel, BBox, Provenance};
use repcount::teachers::{LabelTeacher, OracleTeacher};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> repcount::Result<()> {
    let cfg = AnchorConfig { sizes: vec![20.0, 28.0, 40.0], aspect_ratios: vec![0.5, 1.0, 2.0], stride: 16 };
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(5.0, 0.0, 15.0, 10.0);
    println!("iou of half-shifted squares: {:.4}", iou(&a, &b));
    let delta = encode_box(&b, &a);
    println!("delta {:?} decodes back to {:?}", delta.as_array(), decode_box(&delta, &a));

    let class = |size_range| ClassSpec { shape: None, size_range, count_range: (6, 10) };
    let spec = SceneSpec { classes: vec![class((18.0, 26.0)), class((18.0, 26.0))], ..SceneSpec::single_class(192, (6, 10), (18.0, 26.0)) };
    let scene = generate_scene(&spec, "scene", &mut ChaCha8Rng::seed_from_u64(3))?;
    let (hf, wf) = (scene.height().div_ceil(cfg.stride), scene.width().div_ceil(cfg.stride));
    let anchors = generate_anchors(&cfg, hf, wf);
    println!("{hf}x{wf} grid, {} anchors per cell, {} anchors", cfg.per_location(), anchors.len());

    let count = scene.gt_count() as f64;
    let annotated: Vec<_> = scene.annotated_boxes().into_iter().map(|bx| (bx, count)).collect();
    let oracle = OracleTeacher::for_image(&scene, 2.0).expect("synthetic scenes carry hidden ground truth");
    for (name, teacher) in [("no teacher", None), ("oracle", Some(&oracle as &dyn LabelTeacher))] {
        let t = assign_anchor_targets(&anchors, &annotated, teacher);
        let from_teacher: Vec<f64> =
            t.targets.iter().filter(|x| x.provenance == Provenance::Teacher && x.label == AnchorLabel::Positive).filter_map(|x| x.repetition).collect();
        println!(
            "{name:>10}: {} positive, {} negative, {} ignored; {} teacher anchors, {} of them positive (counts {:?})",
            t.count_label(AnchorLabel::Positive),
            t.count_label(AnchorLabel::Negative),
            t.count_label(AnchorLabel::Ignore),
            t.count_provenance(Provenance::Teacher),
            from_teacher.len(),
            from_teacher.iter().take(3).collect::<Vec<_>>(),
        );
    }
    let hidden = scene.hidden_gt.as_ref().expect("hidden ground truth");
    println!("annotated class count {count}, hidden classes {:?}", hidden.classes.iter().map(|c| c.count()).collect::<Vec<_>>());
    Ok(())
}
