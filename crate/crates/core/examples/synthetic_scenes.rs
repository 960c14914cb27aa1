//! Generates a small synthetic dataset, saves it, and loads it back.
//!
//! `cargo run --example synthetic_scenes -- <out-dir>`

use repcount::data::{generate_dataset, load_dataset, save_dataset, ClassSpec, DatasetSpec, SceneSpec, ANNOTATION_FILE};

fn main() -> repcount::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("repcount-scenes"), Into::into);
    let class = ClassSpec { shape: None, size_range: (18.0, 26.0), count_range: (4, 15) };
    let spec = DatasetSpec {
        scenes: 6,
        scene: SceneSpec { classes: vec![class.clone(), class], ..SceneSpec::single_class(192, (4, 15), (18.0, 26.0)) },
        seed: 7,
    };
    let images = generate_dataset(&spec)?;
    save_dataset(&images, &out)?;
    println!("wrote {} scenes and {} to {}", images.len(), ANNOTATION_FILE, out.display());

    let loaded = load_dataset(&out)?;
    for img in &loaded {
        let hidden: Vec<usize> = img.hidden_gt.as_ref().map_or_else(Vec::new, |g| g.classes.iter().map(|c| c.count()).collect());
        println!(
            "{}: {}x{}, class {} annotated with {} dots and {} exemplars; per-class counts {hidden:?}",
            img.name,
            img.width(),
            img.height(),
            img.annotated_class,
            img.gt_count(),
            img.exemplar_boxes.len()
        );
    }
    Ok(())
}
