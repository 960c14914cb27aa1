//! Trains the proposal network, freezes it, trains the density network on
//! its exemplars, and writes both checkpoints and loss logs.
//!
//! `cargo run --release --example two_stage_training -- <out-dir>`
//!
//! The run is deliberately short; the `train-rpn` and `train-dpn` commands
//! run the full schedule.

use std::path::PathBuf;

use repcount::data::{generate_dataset, DatasetSpec, SceneSpec};
use repcount::train::{desk_config, train_dpn, train_reprpn, write_loss_log};

fn main() -> repcount::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("repcount-train"), Into::into);
    std::fs::create_dir_all(&out).map_err(|e| repcount::Error::Io { path: out.clone(), source: e })?;

    let images = generate_dataset(&DatasetSpec { scenes: 24, scene: SceneSpec::desk(), seed: 1 })?;
    let mut cfg = desk_config();
    cfg.rpn_epochs = 6;
    cfg.dpn_epochs = 3;

    let stage1 = train_reprpn(&images, &cfg)?;
    stage1.checkpoint(&cfg)?.save(&out.join("rpn.ckpt"))?;
    write_loss_log(&stage1.log, &out.join("rpn.log.jsonl"))?;
    println!("stage 1 losses {:?}", stage1.log.iter().map(|e| (e.loss * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("anchor targets {:?}", stage1.teacher_stats);

    let frozen = stage1.rpn.clone();
    let stage2 = train_dpn(&images, &stage1.backbone, &stage1.rpn, &cfg)?;
    assert_eq!(frozen, stage1.rpn, "stage 2 leaves the proposal network untouched");
    stage2.checkpoint(&cfg)?.save(&out.join("dpn.ckpt"))?;
    write_loss_log(&stage2.log, &out.join("dpn.log.jsonl"))?;
    println!("stage 2 losses {:?}", stage2.log.iter().map(|e| e.loss).collect::<Vec<_>>());
    println!("density targets {:?}", stage2.targets);
    println!("checkpoints in {}", out.display());
    Ok(())
}
