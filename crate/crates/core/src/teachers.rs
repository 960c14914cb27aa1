//! Knowledge-transfer teachers that label what the annotation leaves out.
//!
//! A [`LabelTeacher`] supplies objectness and repetition targets for anchors
//! that touch no annotated box; a [`DensityTeacher`] supplies target density
//! maps for exemplars that touch no annotated box. Both are bound to one image
//! at construction. The oracle implementations read the complete ground truth
//! of synthetic scenes; pretrained networks can implement the same traits.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, HiddenGt};
use crate::density::{render_density, DensityMap};
use crate::geometry::{iou, BBox};

/// IoU above which an oracle considers a box to cover a hidden instance.
pub const ORACLE_IOU: f64 = 0.5;

pub trait LabelTeacher {
    /// `(is_object, repetition)` for an anchor of the bound image.
    fn label(&self, anchor: &BBox) -> (bool, f64);
}

pub trait DensityTeacher {
    /// Target density for an exemplar of the bound image.
    fn density(&self, exemplar: &BBox) -> DensityMap;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    #[default]
    Oracle,
    None,
}

impl std::str::FromStr for TeacherMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(TeacherMode::Oracle),
            "none" => Ok(TeacherMode::None),
            other => Err(format!("unknown teacher `{other}` (expected oracle or none)")),
        }
    }
}

/// Best-matching hidden instance: `(class index, iou)`.
fn best_match(bx: &BBox, hidden: &HiddenGt) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (ci, class) in hidden.classes.iter().enumerate() {
        for b in &class.boxes {
            let v = iou(bx, b);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((ci, v));
            }
        }
    }
    best
}

/// Labels an anchor from the hidden ground truth: `(true, class count)` when it
/// overlaps some hidden instance by more than [`ORACLE_IOU`], else `(false, 0)`.
pub fn oracle_label_teacher(anchor: &BBox, hidden: &HiddenGt) -> (bool, f64) {
    match best_match(anchor, hidden) {
        Some((ci, v)) if v > ORACLE_IOU => (true, hidden.classes[ci].count() as f64),
        _ => (false, 0.0),
    }
}

/// Density of the class the exemplar covers, or an all-zero map over background.
pub fn oracle_density_teacher(exemplar: &BBox, hidden: &HiddenGt, h: usize, w: usize, sigma: f64) -> DensityMap {
    match best_match(exemplar, hidden) {
        Some((ci, v)) if v > ORACLE_IOU => {
            render_density(&hidden.classes[ci].dots, h, w, sigma).expect("hidden dots lie inside the image")
        }
        _ => DensityMap::zeros(h, w),
    }
}

/// Oracle teacher bound to one synthetic image.
#[derive(Debug, Clone)]
pub struct OracleTeacher<'a> {
    hidden: &'a HiddenGt,
    h: usize,
    w: usize,
    sigma: f64,
}

impl<'a> OracleTeacher<'a> {
    pub fn new(hidden: &'a HiddenGt, h: usize, w: usize, sigma: f64) -> Self {
        OracleTeacher { hidden, h, w, sigma }
    }

    /// `None` for images without hidden ground truth.
    pub fn for_image(image: &'a AnnotatedImage, sigma: f64) -> Option<Self> {
        image.hidden_gt.as_ref().map(|g| OracleTeacher::new(g, image.height(), image.width(), sigma))
    }
}

impl LabelTeacher for OracleTeacher<'_> {
    fn label(&self, anchor: &BBox) -> (bool, f64) {
        oracle_label_teacher(anchor, self.hidden)
    }
}

impl DensityTeacher for OracleTeacher<'_> {
    fn density(&self, exemplar: &BBox) -> DensityMap {
        oracle_density_teacher(exemplar, self.hidden, self.h, self.w, self.sigma)
    }
}
