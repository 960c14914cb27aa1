use std::path::Path;

use repcount::cli::run;
use repcount::data::load_dataset;
use repcount::density::{count, read_density};
use repcount::eval::EvalReport;
use repcount::train::{load_dpn_checkpoint, load_rpn_checkpoint, EpochLoss};

fn exit(args: &[&str]) -> i32 {
    run(std::iter::once("repcount").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_data(dir: &Path, seed: &str) {
    let code = exit(&[
        "gen-data", "--out", &s(dir), "--scenes", "3", "--size", "96", "--count-min", "2", "--count-max", "5", "--size-min", "14",
        "--size-max", "18", "--seed", seed,
    ]);
    assert_eq!(code, 0);
}

#[test]
fn usage_errors_and_help() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, "{}").unwrap();
    assert_eq!(exit(&["--help"]), 0);
    assert_eq!(exit(&["train-rpn", "--help"]), 0);
    assert_eq!(exit(&["train-rpn"]), 1);
    assert_eq!(exit(&["frobnicate"]), 1);
    assert_eq!(exit(&["gen-data", "--out", &s(tmp.path()), "--classes", "4"]), 1);
    assert_eq!(exit(&["eval", "--ckpt-rpn", "a", "--ckpt-dpn", "b", "--data", "c", "--out", "d", "--k", "x"]), 1);
    let conflicting = ["train-rpn", "--data", "d", "--out", "o", "--config", &s(&cfg), "--preset", "desk"];
    assert_eq!(exit(&conflicting), 1);
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = s(&tmp.path().join("nope"));
    let out = s(&tmp.path().join("o.ckpt"));
    assert_eq!(exit(&["train-rpn", "--data", &missing, "--out", &out]), 2);
    assert_eq!(exit(&["train-dpn", "--data", &missing, "--rpn", &missing, "--out", &out]), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(exit(&["gen-data", "--out", &s(tmp.path()), "--config", &s(&bad)]), 2);
}

#[test]
fn gen_data_round_trips_through_the_loader() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path(), "4");
    assert!(tmp.path().join("annotations.json").is_file());
    let images = load_dataset(tmp.path()).unwrap();
    assert_eq!(images.len(), 3);
    for img in &images {
        assert!(tmp.path().join(&img.name).is_file());
        assert_eq!((img.width(), img.height()), (96, 96));
        assert!((2..=5).contains(&img.gt_count()));
        assert_eq!(img.exemplar_boxes.len(), 3);
        for d in &img.dots {
            assert!(d.x >= 0.0 && d.x < 96.0 && d.y >= 0.0 && d.y < 96.0);
        }
    }

    let again = tempfile::tempdir().unwrap();
    small_data(again.path(), "4");
    let a = std::fs::read(tmp.path().join("annotations.json")).unwrap();
    let b = std::fs::read(again.path().join("annotations.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_eval_predict_file_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&tmp.path().join(n));
    small_data(&tmp.path().join("data"), "7");
    let common = ["--data", &p("data"), "--preset", "desk", "--epochs", "1", "--seed", "3"];

    let (rpn_ckpt, dpn_ckpt) = (p("rpn.ckpt"), p("dpn.ckpt"));
    let mut rpn = vec!["train-rpn", "--out", &rpn_ckpt];
    rpn.extend(common);
    assert_eq!(exit(&rpn), 0);
    let mut dpn = vec!["train-dpn", "--rpn", &rpn_ckpt, "--out", &dpn_ckpt, "--top-k", "1"];
    dpn.extend(common);
    assert_eq!(exit(&dpn), 0);

    let (_, _, meta) = load_rpn_checkpoint(&tmp.path().join("rpn.ckpt")).unwrap();
    assert_eq!(meta.train.rpn_epochs, 1);
    let (_, dmeta) = load_dpn_checkpoint(&tmp.path().join("dpn.ckpt")).unwrap();
    assert_eq!(dmeta.train.top_k, 1);

    for log in ["rpn.log.jsonl", "dpn.log.jsonl"] {
        let text = std::fs::read_to_string(tmp.path().join(log)).unwrap();
        let entries: Vec<EpochLoss> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries.len(), 1, "{log}");
        assert_eq!(entries[0].epoch, 1);
        assert!(entries[0].loss.is_finite());
    }

    let eval = ["eval", "--ckpt-rpn", &p("rpn.ckpt"), "--ckpt-dpn", &p("dpn.ckpt"), "--data", &p("data"), "--k", "1,2", "--out", &p("report.json")];
    assert_eq!(exit(&eval), 0);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.ks, vec![1, 2]);
    assert_eq!(report.images.len() + report.skipped.len(), 3);
    assert!(report.teacher_stats.is_some() && report.dpn_targets.is_some());
    for k in ["1", "2"] {
        let m = report.fast[k];
        assert!(m.rmse >= m.mae && m.mae >= 0.0);
    }

    let image = s(&tmp.path().join("data").join(&report.images[0].name));
    let predict = ["predict", "--image", &image, "--ckpt-rpn", &p("rpn.ckpt"), "--ckpt-dpn", &p("dpn.ckpt"), "--top-k", "2", "--out-dir", &p("pred")];
    assert_eq!(exit(&predict), 0);
    let stem = Path::new(&image).file_stem().unwrap().to_string_lossy().into_owned();
    assert!(tmp.path().join("pred").join(format!("{stem}_overlay.png")).is_file());
    let z = read_density(&tmp.path().join("pred").join(format!("{stem}_exemplar0.bin"))).unwrap();
    assert_eq!(z.values.dim(), (96, 96));
    assert!(count(&z).is_finite() && z.values.iter().all(|&v| v >= 0.0));
}
