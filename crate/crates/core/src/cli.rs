//! Command-line front end.
//!
//! Settings resolve as: command-line flag, then `REPCOUNT_SEED` (seed only),
//! then the `--config` file, then built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::data::{generate_dataset, load_dataset, save_dataset, ClassSpec, DatasetSpec, SceneSpec};
use crate::dpn::CorrelationSource;
use crate::eval::evaluate;
use crate::geometry::ScoreKey;
use crate::pipeline::{write_prediction, Counter};
use crate::teachers::TeacherMode;
use crate::train::{load_dpn_checkpoint, load_rpn_checkpoint, train_dpn, desk_config, train_reprpn, write_loss_log, TrainConfig};
use crate::{Error, Result};

pub const SEED_ENV: &str = "REPCOUNT_SEED";

#[derive(Debug, Parser)]
#[command(name = "repcount", version, about = "Class-agnostic object counting from automatically chosen exemplars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of shape scenes.
    GenData(GenDataArgs),
    /// Stage 1: train the repetition proposal network.
    TrainRpn(TrainRpnArgs),
    /// Stage 2: train the density network on exemplars from a frozen stage-1 model.
    TrainDpn(TrainDpnArgs),
    /// Score a dataset with top-k counting metrics.
    Eval(EvalArgs),
    /// Count objects in one image and write density maps and an overlay.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TeacherArg {
    Oracle,
    None,
}

impl From<TeacherArg> for TeacherMode {
    fn from(t: TeacherArg) -> Self {
        match t {
            TeacherArg::Oracle => TeacherMode::Oracle,
            TeacherArg::None => TeacherMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectArg {
    Objectness,
    Repetition,
}

impl From<SelectArg> for ScoreKey {
    fn from(s: SelectArg) -> Self {
        match s {
            SelectArg::Objectness => ScoreKey::Objectness,
            SelectArg::Repetition => ScoreKey::Repetition,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum PresetArg {
    /// Long-schedule settings: small learning rate, plain encoder.
    #[default]
    Default,
    /// Settings that train in minutes on the default generated scenes.
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Backbone,
    Encoder,
}

impl From<SourceArg> for CorrelationSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Backbone => CorrelationSource::Backbone,
            SourceArg::Encoder => CorrelationSource::Encoder,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for PNGs and annotations.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset spec (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of object classes; only the first is annotated.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub count_min: Option<usize>,
    #[arg(long)]
    pub count_max: Option<usize>,
    /// Smallest instance side in pixels.
    #[arg(long)]
    pub size_min: Option<f64>,
    #[arg(long)]
    pub size_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Flags shared by both training stages.
#[derive(Debug, Args)]
pub struct CommonTrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training config (JSON, any subset of fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting settings when no --config is given.
    #[arg(long, value_enum, default_value_t, conflicts_with = "config")]
    pub preset: PresetArg,
    /// Loss log, one JSON object per epoch. Defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub teacher: Option<TeacherArg>,
    /// Width of target density maps in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainRpnArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub anchor_batch: Option<usize>,
    /// Use unscaled attention logits.
    #[arg(long)]
    pub attention_eq2_literal: bool,
    /// Residual connections and feed-forward sublayers in the encoder.
    #[arg(long)]
    pub transformer_standard: bool,
    /// Regress background repetition scores toward 0 instead of masking them.
    #[arg(long)]
    pub negative_repetition: bool,
}

#[derive(Debug, Args)]
pub struct TrainDpnArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Stage-1 checkpoint; stage 2 never runs without one.
    #[arg(long)]
    pub rpn: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, value_enum)]
    pub select_by: Option<SelectArg>,
    #[arg(long, value_enum)]
    pub correlation_source: Option<SourceArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt_rpn: PathBuf,
    #[arg(long)]
    pub ckpt_dpn: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ckpt_rpn: PathBuf,
    #[arg(long)]
    pub ckpt_dpn: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Directory for density files and the overlay.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `REPCOUNT_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(config))
}

fn base_config(a: &CommonTrainArgs) -> Result<TrainConfig> {
    match (&a.config, a.preset) {
        (Some(p), _) => read_json(p),
        (None, PresetArg::Default) => Ok(TrainConfig::default()),
        (None, PresetArg::Desk) => Ok(desk_config()),
    }
}

fn apply_common(cfg: &mut TrainConfig, a: &CommonTrainArgs, stage2: bool) -> Result<()> {
    if let Some(e) = a.epochs {
        if stage2 {
            cfg.dpn_epochs = e;
        } else {
            cfg.rpn_epochs = e;
        }
    }
    if let Some(lr) = a.lr {
        if stage2 {
            cfg.dpn_lr = Some(lr);
        } else {
            cfg.lr = lr;
        }
    }
    if let Some(t) = a.teacher {
        cfg.teacher = t.into();
    }
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    Ok(())
}

fn log_path(a: &CommonTrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetSpec { scenes: 100, scene: SceneSpec::desk(), seed: 0 },
    };
    if let Some(n) = a.scenes {
        spec.scenes = n;
    }
    if let Some(s) = a.size {
        spec.scene.width = s;
        spec.scene.height = s;
    }
    if let Some(c) = a.classes {
        if !(1..=3).contains(&c) {
            return Err(Error::InvalidArgument(format!("--classes must be 1, 2, or 3, got {c}")));
        }
        let template = spec.scene.classes[0].clone();
        spec.scene.classes = (0..c).map(|_| ClassSpec { shape: None, ..template.clone() }).collect();
        spec.scene.annotated_class = 0;
    }
    for class in &mut spec.scene.classes {
        if let Some(lo) = a.count_min {
            class.count_range.0 = lo;
        }
        if let Some(hi) = a.count_max {
            class.count_range.1 = hi;
        }
        if let Some(lo) = a.size_min {
            class.size_range.0 = lo;
        }
        if let Some(hi) = a.size_max {
            class.size_range.1 = hi;
        }
    }
    spec.seed = resolve_seed(a.seed, spec.seed)?;
    let images = generate_dataset(&spec)?;
    save_dataset(&images, &a.out)?;
    println!("{}", serde_json::json!({ "out": a.out, "scenes": images.len(), "seed": spec.seed }));
    Ok(())
}

pub fn train_rpn_cmd(a: &TrainRpnArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_common(&mut cfg, &a.common, false)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(b) = a.anchor_batch {
        cfg.anchor_batch = b;
    }
    if a.attention_eq2_literal {
        cfg.rpn.scaled_attention = false;
    }
    if a.transformer_standard {
        cfg.rpn.transformer_standard = true;
    }
    if a.negative_repetition {
        cfg.negative_repetition = true;
    }
    cfg.validate()?;
    let images = load_dataset(&a.common.data)?;
    let run = train_reprpn(&images, &cfg)?;
    run.checkpoint(&cfg)?.save(&a.common.out)?;
    let log = log_path(&a.common);
    write_loss_log(&run.log, &log)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.common.out,
            "log": log,
            "final_loss": run.log.last().map(|e| e.loss),
            "teacher_stats": run.teacher_stats,
        })
    );
    Ok(())
}

pub fn train_dpn_cmd(a: &TrainDpnArgs) -> Result<()> {
    let (backbone, rpn, meta) = load_rpn_checkpoint(&a.rpn)?;
    let mut cfg = base_config(&a.common)?;
    apply_common(&mut cfg, &a.common, true)?;
    // the frozen stage-1 model defines these
    cfg.backbone = meta.train.backbone.clone();
    cfg.rpn = meta.train.rpn.clone();
    if let Some(k) = a.top_k {
        cfg.top_k = k;
    }
    if let Some(s) = a.select_by {
        cfg.select_by = s.into();
    }
    if let Some(s) = a.correlation_source {
        cfg.dpn.correlation_source = s.into();
    }
    cfg.validate()?;
    let images = load_dataset(&a.common.data)?;
    let run = train_dpn(&images, &backbone, &rpn, &cfg)?;
    run.checkpoint(&cfg)?.save(&a.common.out)?;
    let log = log_path(&a.common);
    write_loss_log(&run.log, &log)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.common.out,
            "log": log,
            "final_loss": run.log.last().map(|e| e.loss),
            "targets": run.targets,
        })
    );
    Ok(())
}

fn load_counter(rpn_path: &Path, dpn_path: &Path) -> Result<(Counter, crate::train::RpnCheckpointMeta, crate::train::DpnCheckpointMeta)> {
    let (backbone, rpn, rpn_meta) = load_rpn_checkpoint(rpn_path)?;
    let (dpn, dpn_meta) = load_dpn_checkpoint(dpn_path)?;
    let counter = Counter::new(backbone, rpn, Some(dpn), dpn_meta.train.select_by, dpn_meta.train.nms_iou)?;
    Ok((counter, rpn_meta, dpn_meta))
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (counter, rpn_meta, dpn_meta) = load_counter(&a.ckpt_rpn, &a.ckpt_dpn)?;
    let images = load_dataset(&a.data)?;
    let mut report = evaluate(&counter, &images, &a.k)?;
    report.teacher_stats = Some(rpn_meta.teacher_stats);
    report.dpn_targets = Some(dpn_meta.targets);
    write_json(&report, &a.out)?;
    println!("{}", serde_json::json!({ "report": a.out, "dpn": report.dpn, "fast": report.fast }));
    Ok(())
}

pub fn predict_cmd(a: &PredictArgs) -> Result<()> {
    if a.top_k == 0 {
        return Err(Error::InvalidArgument("--top-k must be at least 1".into()));
    }
    let (counter, _, _) = load_counter(&a.ckpt_rpn, &a.ckpt_dpn)?;
    let image = image::open(&a.image).map_err(|e| Error::Image { path: a.image.clone(), source: e })?.to_rgb8();
    let preds = counter.predict(&image, a.top_k)?;
    let out = write_prediction(&a.image, &image, &preds, &a.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainRpn(a) => train_rpn_cmd(a),
        Command::TrainDpn(a) => train_dpn_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["repcount", "frobnicate"]), 1);
        assert_eq!(run(["repcount", "train-rpn", "--data", "x"]), 1);
        assert_eq!(run(["repcount", "train-rpn", "--data", "x", "--out", "y", "--teacher", "famnet"]), 1);
        assert_eq!(run(["repcount", "--help"]), 0);
    }

    #[test]
    fn k_list_parses() {
        let cli = Cli::try_parse_from(["repcount", "eval", "--ckpt-rpn", "a", "--ckpt-dpn", "b", "--data", "d", "--k", "1,3,5", "--out", "r.json"]).unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.k, vec![1, 3, 5]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn missing_stage_one_checkpoint_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.ckpt");
        let code = run([
            "repcount".as_ref(),
            "train-dpn".as_ref(),
            "--data".as_ref(),
            dir.path().as_os_str(),
            "--out".as_ref(),
            dir.path().join("dpn.ckpt").as_os_str(),
            "--rpn".as_ref(),
            missing.as_os_str(),
        ]);
        assert_eq!(code, 2);
    }
}
