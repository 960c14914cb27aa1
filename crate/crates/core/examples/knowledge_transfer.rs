//! Compares anchor targets and stage-2 density targets with and without the
//! oracle teacher on scenes where one of two classes is left unannotated.

use repcount::data::{generate_dataset, ClassSpec, DatasetSpec, SceneSpec};
use repcount::density::count;
use repcount::geometry::{generate_anchors, Provenance};
use repcount::teachers::TeacherMode;
use repcount::train::{exemplar_target, image_targets, TargetSource, TrainConfig};

fn main() -> repcount::Result<()> {
    let class = ClassSpec { shape: None, size_range: (18.0, 26.0), count_range: (5, 12) };
    let scene = SceneSpec { classes: vec![class.clone(), class], ..SceneSpec::single_class(192, (5, 12), (18.0, 26.0)) };
    let images = generate_dataset(&DatasetSpec { scenes: 8, scene, seed: 4 })?;

    for mode in [TeacherMode::Oracle, TeacherMode::None] {
        let cfg = TrainConfig { teacher: mode, ..TrainConfig::default() };
        let (mut gt, mut teacher, mut matched) = (0, 0, 0);
        for img in &images {
            let (hf, wf) = (img.height().div_ceil(16), img.width().div_ceil(16));
            let anchors = generate_anchors(&cfg.rpn.anchors, hf, wf);
            let t = image_targets(img, &anchors, &cfg);
            gt += t.count_provenance(Provenance::GroundTruth);
            teacher += t.count_provenance(Provenance::Teacher);
            let hidden = img.hidden_gt.as_ref().expect("synthetic");
            let other = hidden.classes.iter().find(|c| c.class != img.annotated_class).expect("two classes");
            // teacher repetition targets on the hidden class carry its count
            matched += t.targets.iter().filter(|a| a.provenance == Provenance::Teacher && a.repetition == Some(other.count() as f64)).count();
        }
        println!("{mode:?}: {gt} ground-truth anchors, {teacher} teacher anchors, {matched} carrying the hidden class count");
    }

    let img = &images[0];
    let hidden = img.hidden_gt.as_ref().expect("synthetic");
    let other = hidden.classes.iter().find(|c| c.class != img.annotated_class).expect("two classes");
    let exemplar = other.boxes[0];
    for mode in [TeacherMode::Oracle, TeacherMode::None] {
        let (source, z) = exemplar_target(img, &img.annotated_boxes(), &exemplar, mode, 6.0)?;
        match (source, z) {
            (TargetSource::Skipped, _) | (_, None) => println!("{mode:?}: exemplar on the hidden class is skipped"),
            (source, Some(z)) => {
                println!("{mode:?}: {source:?} target for the hidden-class exemplar sums to {:.2} (class count {})", count(&z), other.count())
            }
        }
    }
    Ok(())
}
