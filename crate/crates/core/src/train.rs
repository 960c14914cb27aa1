//! Two-stage training. Stage 1 fits the proposal network on anchor targets;
//! stage 2 freezes it, selects exemplars, and fits the density network.
//!
//! Backbone features, anchor targets, correlation maps, and density targets
//! depend only on frozen weights, so they are computed once per image.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::AnnotatedImage;
use crate::density::{render_density, DensityMap, DEFAULT_SIGMA};
use crate::dpn::{mse_loss, Dpn, DpnConfig};
use crate::features::{Backbone, BackboneConfig, ToyBackbone};
use crate::geometry::{assign_anchor_targets, generate_anchors, iou, sample_anchor_batch, AnchorLabel, AnchorTargets, Provenance, ScoreKey};
use crate::nn::{Adam, AdamConfig, ParamSet};
use crate::pipeline::{exemplar_correlation, Counter};
use crate::reprpn::{reprpn_loss, LossBreakdown, LossWeights, RepRpn, RepRpnConfig};
use crate::teachers::{DensityTeacher, LabelTeacher, OracleTeacher, TeacherMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Adam learning rate for stage 1.
    pub lr: f64,
    /// Stage-2 learning rate; falls back to `lr`.
    pub dpn_lr: Option<f64>,
    pub rpn_epochs: usize,
    pub dpn_epochs: usize,
    /// Seeds anchor sampling and image order. Model initialization has its own seeds.
    pub seed: u64,
    pub lambda: f64,
    pub anchor_batch: usize,
    /// Exemplars per image in stage 2.
    pub top_k: usize,
    pub teacher: TeacherMode,
    /// Regress the repetition score of annotated-side negatives toward 0
    /// instead of masking it.
    pub negative_repetition: bool,
    pub nms_iou: f64,
    pub select_by: ScoreKey,
    /// Gaussian width of target density maps.
    pub sigma: f64,
    pub backbone: BackboneConfig,
    pub rpn: RepRpnConfig,
    pub dpn: DpnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            dpn_lr: None,
            rpn_epochs: 50,
            dpn_epochs: 50,
            seed: 0,
            lambda: 1.0,
            anchor_batch: 96,
            top_k: 3,
            teacher: TeacherMode::Oracle,
            negative_repetition: false,
            nms_iou: 0.7,
            select_by: ScoreKey::Repetition,
            sigma: DEFAULT_SIGMA,
            backbone: BackboneConfig::default(),
            rpn: RepRpnConfig::default(),
            dpn: DpnConfig::default(),
        }
    }
}

/// Settings that train in minutes on [`SceneSpec::desk`](crate::data::SceneSpec::desk) scenes.
///
/// Departs from the defaults in: learning rates, a residual encoder, background
/// repetition supervision, anchor sizes matched to the instances, wider target
/// blobs, and one exemplar per image in stage 2.
pub fn desk_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        lr: 1e-4,
        dpn_lr: Some(1e-3),
        negative_repetition: true,
        sigma: 6.0,
        top_k: 1,
        ..TrainConfig::default()
    };
    cfg.rpn.transformer_standard = true;
    cfg.rpn.anchors.sizes = vec![20.0, 28.0, 40.0];
    cfg
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        let rate_ok = |r: f64| r.is_finite() && r > 0.0;
        if !rate_ok(self.lr) || !self.dpn_lr.is_none_or(rate_ok) {
            return bad("learning rates must be positive");
        }
        if self.rpn_epochs == 0 || self.dpn_epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.anchor_batch == 0 || self.top_k == 0 {
            return bad("anchor batch and top_k must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if self.backbone.pools.iter().product::<usize>() != self.rpn.anchors.stride {
            return bad("anchor stride must equal the backbone stride");
        }
        self.rpn.validate()
    }

    pub fn stage2_lr(&self) -> f64 {
        self.dpn_lr.unwrap_or(self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// Provenance of stage-1 anchor targets, summed over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TeacherStats {
    pub images: usize,
    pub anchors: usize,
    pub ground_truth: usize,
    pub teacher: usize,
    /// Teacher-labelled anchors marked as objects.
    pub teacher_positive: usize,
    pub ignored: usize,
}

impl TeacherStats {
    fn add(&mut self, t: &AnchorTargets) {
        self.images += 1;
        self.anchors += t.len();
        self.ground_truth += t.count_provenance(Provenance::GroundTruth);
        self.teacher += t.count_provenance(Provenance::Teacher);
        self.ignored += t.count_provenance(Provenance::Ignore);
        self.teacher_positive += t
            .targets
            .iter()
            .filter(|a| a.provenance == Provenance::Teacher && a.label == AnchorLabel::Positive)
            .count();
    }
}

/// Sources of stage-2 density targets, summed over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetStats {
    pub exemplars: usize,
    pub ground_truth: usize,
    pub teacher: usize,
    /// Exemplars with no target because no teacher is available.
    pub skipped: usize,
    pub images_without_exemplars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnCheckpointMeta {
    pub stage: u32,
    pub train: TrainConfig,
    pub log: Vec<EpochLoss>,
    pub teacher_stats: TeacherStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpnCheckpointMeta {
    pub stage: u32,
    pub train: TrainConfig,
    pub log: Vec<EpochLoss>,
    pub targets: TargetStats,
}

/// Label teacher for an image under `mode`, when one can be built.
fn label_teacher(image: &AnnotatedImage, mode: TeacherMode, sigma: f64) -> Option<OracleTeacher<'_>> {
    match mode {
        TeacherMode::Oracle => OracleTeacher::for_image(image, sigma),
        TeacherMode::None => None,
    }
}

fn warn_missing_teacher(images: &[AnnotatedImage], mode: TeacherMode) {
    if mode == TeacherMode::Oracle {
        let missing = images.iter().filter(|i| i.hidden_gt.is_none()).count();
        if missing > 0 {
            log::warn!("{missing} images carry no hidden ground truth; the oracle teacher is skipped for them");
        }
    }
}

/// Anchor targets for one image from its annotation and, if configured, the teacher.
pub fn image_targets(image: &AnnotatedImage, anchors: &[crate::geometry::BBox], cfg: &TrainConfig) -> AnchorTargets {
    let c = image.gt_count() as f64;
    let annotated: Vec<_> = image.annotated_boxes().into_iter().map(|b| (b, c)).collect();
    let teacher = label_teacher(image, cfg.teacher, cfg.sigma);
    let mut targets = assign_anchor_targets(anchors, &annotated, teacher.as_ref().map(|t| t as &dyn LabelTeacher));
    if cfg.negative_repetition {
        for t in &mut targets.targets {
            if t.label == AnchorLabel::Negative && t.repetition.is_none() {
                t.repetition = Some(0.0);
            }
        }
    }
    targets
}

struct RpnSample {
    x: Array2<f64>,
    hf: usize,
    wf: usize,
    targets: AnchorTargets,
}

pub struct RpnTraining {
    pub backbone: ToyBackbone,
    pub rpn: RepRpn,
    pub log: Vec<EpochLoss>,
    /// Loss of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
    pub teacher_stats: TeacherStats,
}

impl RpnTraining {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let meta = RpnCheckpointMeta { stage: 1, train: cfg.clone(), log: self.log.clone(), teacher_stats: self.teacher_stats };
        let mut ck = Checkpoint::new(&meta)?;
        ck.add_params("rpn", &self.rpn.params);
        Ok(ck)
    }
}

/// Stage 1: one Adam step per image per epoch on a sampled anchor batch.
pub fn train_reprpn(images: &[AnnotatedImage], cfg: &TrainConfig) -> Result<RpnTraining> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    warn_missing_teacher(images, cfg.teacher);
    let backbone = ToyBackbone::new(cfg.backbone.clone());
    let mut rpn = RepRpn::new(cfg.rpn.clone(), backbone.out_channels())?;
    let mut stats = TeacherStats::default();
    let samples = images
        .iter()
        .map(|img| {
            let fm = backbone.extract(&img.image);
            let anchors = generate_anchors(&cfg.rpn.anchors, fm.hf(), fm.wf());
            let targets = image_targets(img, &anchors, cfg);
            stats.add(&targets);
            Ok(RpnSample { x: rpn.sequence(&fm)?, hf: fm.hf(), wf: fm.wf(), targets })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "stage 1: {} images, {} anchors ({} teacher-labelled)",
        stats.images,
        stats.anchors,
        stats.teacher
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &rpn.params);
    let weights = LossWeights { lambda: cfg.lambda };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.rpn_epochs);
    let mut steps = Vec::with_capacity(cfg.rpn_epochs * samples.len());
    for epoch in 1..=cfg.rpn_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            let sampled = sample_anchor_batch(&s.targets, cfg.anchor_batch, &mut rng);
            let fwd = rpn.forward_sequence(s.x.clone(), s.hf, s.wf);
            let (loss, d_out) = reprpn_loss(&fwd.outputs, &s.targets, &sampled, weights);
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss.total });
            }
            let (grads, _) = rpn.backward(&fwd, &d_out);
            adam.step(&mut rpn.params, &grads);
            total += loss.total;
            steps.push(loss);
        }
        let loss = total / samples.len() as f64;
        log::info!("stage 1 epoch {epoch}: loss {loss:.5}");
        log.push(EpochLoss { epoch, loss });
    }
    Ok(RpnTraining { backbone, rpn, log, steps, teacher_stats: stats })
}

/// Restores the backbone, proposal network, and metadata of a stage-1 checkpoint.
pub fn load_rpn_checkpoint(path: &Path) -> Result<(ToyBackbone, RepRpn, RpnCheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: RpnCheckpointMeta = ck.metadata().map_err(|_| Error::Checkpoint(format!("{}: not a stage-1 checkpoint", path.display())))?;
    if meta.stage != 1 {
        return Err(Error::Checkpoint(format!("{}: expected a stage-1 checkpoint, found stage {}", path.display(), meta.stage)));
    }
    let backbone = ToyBackbone::new(meta.train.backbone.clone());
    let mut rpn = RepRpn::new(meta.train.rpn.clone(), backbone.out_channels())?;
    ck.load_params("rpn", &mut rpn.params)?;
    Ok((backbone, rpn, meta))
}

pub fn load_dpn_checkpoint(path: &Path) -> Result<(Dpn, DpnCheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: DpnCheckpointMeta = ck.metadata().map_err(|_| Error::Checkpoint(format!("{}: not a stage-2 checkpoint", path.display())))?;
    if meta.stage != 2 {
        return Err(Error::Checkpoint(format!("{}: expected a stage-2 checkpoint, found stage {}", path.display(), meta.stage)));
    }
    let mut dpn = Dpn::new(meta.train.dpn.clone());
    ck.load_params("dpn", &mut dpn.params)?;
    Ok((dpn, meta))
}

/// Where an exemplar's density target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    GroundTruth,
    Teacher,
    Skipped,
}

/// Density target for an exemplar: the annotated dot map if it overlaps any
/// annotated box, else the teacher's map, else nothing.
pub fn exemplar_target(
    image: &AnnotatedImage,
    annotated_boxes: &[crate::geometry::BBox],
    exemplar: &crate::geometry::BBox,
    mode: TeacherMode,
    sigma: f64,
) -> Result<(TargetSource, Option<DensityMap>)> {
    if annotated_boxes.iter().any(|b| iou(exemplar, b) > 0.0) {
        let z = render_density(&image.dots, image.height(), image.width(), sigma)?;
        return Ok((TargetSource::GroundTruth, Some(z)));
    }
    match label_teacher(image, mode, sigma) {
        Some(t) => Ok((TargetSource::Teacher, Some(t.density(exemplar)))),
        None => Ok((TargetSource::Skipped, None)),
    }
}

struct DpnSample {
    corr: Array2<f64>,
    target: DensityMap,
}

struct DpnImage {
    h: usize,
    w: usize,
    exemplars: Vec<DpnSample>,
}

pub struct DpnTraining {
    pub dpn: Dpn,
    pub log: Vec<EpochLoss>,
    /// Mean exemplar loss of every optimizer step, in order.
    pub steps: Vec<f64>,
    pub targets: TargetStats,
}

impl DpnTraining {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let meta = DpnCheckpointMeta { stage: 2, train: cfg.clone(), log: self.log.clone(), targets: self.targets };
        let mut ck = Checkpoint::new(&meta)?;
        ck.add_params("dpn", &self.dpn.params);
        Ok(ck)
    }
}

/// Stage 2: the proposal network is frozen and only chooses exemplars. One
/// Adam step per image per epoch on the mean loss over its exemplars.
pub fn train_dpn(images: &[AnnotatedImage], backbone: &ToyBackbone, rpn: &RepRpn, cfg: &TrainConfig) -> Result<DpnTraining> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    warn_missing_teacher(images, cfg.teacher);
    let counter = Counter::new(backbone.clone(), rpn.clone(), None, cfg.select_by, cfg.nms_iou)?;
    let mut stats = TargetStats::default();
    let mut prepared = Vec::with_capacity(images.len());
    for img in images {
        let analysis = counter.analyze(&img.image)?;
        let chosen = counter.exemplars(&analysis, cfg.top_k);
        if chosen.is_empty() {
            log::warn!("{}: no exemplars selected, skipping", img.name);
            stats.images_without_exemplars += 1;
            continue;
        }
        let boxes = img.annotated_boxes();
        let mut exemplars = Vec::with_capacity(chosen.len());
        for p in &chosen {
            stats.exemplars += 1;
            let (source, target) = exemplar_target(img, &boxes, &p.bbox, cfg.teacher, cfg.sigma)?;
            match source {
                TargetSource::GroundTruth => stats.ground_truth += 1,
                TargetSource::Teacher => stats.teacher += 1,
                TargetSource::Skipped => stats.skipped += 1,
            }
            if let Some(target) = target {
                exemplars.push(DpnSample { corr: exemplar_correlation(&analysis, &p.bbox, &cfg.dpn)?, target });
            }
        }
        if !exemplars.is_empty() {
            prepared.push(DpnImage { h: img.height(), w: img.width(), exemplars });
        }
    }
    log::info!(
        "stage 2: {} exemplars ({} annotated, {} teacher, {} skipped)",
        stats.exemplars,
        stats.ground_truth,
        stats.teacher,
        stats.skipped
    );
    let mut dpn = Dpn::new(cfg.dpn.clone());
    let mut log = Vec::with_capacity(cfg.dpn_epochs);
    let mut steps = Vec::with_capacity(cfg.dpn_epochs * prepared.len());
    if prepared.is_empty() {
        log::warn!("stage 2: no usable exemplars, density network left at initialization");
        return Ok(DpnTraining { dpn, log, steps, targets: stats });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.stage2_lr(), ..AdamConfig::default() }, &dpn.params);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=cfg.dpn_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let img = &prepared[i];
            let scale = 1.0 / img.exemplars.len() as f64;
            let mut grads = dpn.params.zeroed();
            let mut loss = 0.0;
            for ex in &img.exemplars {
                let fwd = dpn.forward(&ex.corr, img.h, img.w);
                let (l, d) = mse_loss(&fwd.density, &ex.target)?;
                let (g, _) = dpn.backward(&fwd, &d);
                grads.add_scaled(&g, scale);
                loss += l * scale;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.step(&mut dpn.params, &grads);
            total += loss;
            steps.push(loss);
        }
        let loss = total / prepared.len() as f64;
        log::info!("stage 2 epoch {epoch}: loss {loss:.6}");
        log.push(EpochLoss { epoch, loss });
    }
    Ok(DpnTraining { dpn, log, steps, targets: stats })
}

/// Writes one `{"epoch":..,"loss":..}` object per line.
pub fn write_loss_log(log: &[EpochLoss], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in log {
        let line = serde_json::to_string(e).expect("loss entries serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Moving average over `window` consecutive values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
