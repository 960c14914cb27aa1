//! Box arithmetic and the anchor machinery of the proposal network.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in continuous pixel
//! coordinates with the origin at the top-left corner of the image.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::teachers::LabelTeacher;

/// Anchors overlapping a ground-truth box above this IoU are positive.
pub const POSITIVE_IOU: f64 = 0.7;
/// Anchors whose best IoU is below this are negative.
pub const NEGATIVE_IOU: f64 = 0.3;

/// Axis-aligned box, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 < x2 && y1 < y2, "degenerate box ({x1}, {y1}, {x2}, {y2})");
        BBox { x1, y1, x2, y2 }
    }

    /// Returns `None` unless the box has finite coordinates and positive extent.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        (finite && x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::try_new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union. Disjoint or touching boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Center/size regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }
}

pub fn encode_box(bx: &BBox, anchor: &BBox) -> BoxDelta {
    let (cx, cy) = bx.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        tx: (cx - acx) / aw,
        ty: (cy - acy) / ah,
        tw: (bx.width() / aw).ln(),
        th: (bx.height() / ah).ln(),
    }
}

pub fn decode_box(delta: &BoxDelta, anchor: &BBox) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta.tx * aw;
    let cy = acy + delta.ty * ah;
    let w = aw * delta.tw.exp();
    let h = ah * delta.th.exp();
    BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
}

/// Anchor shapes tiled at every feature-map location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Side length of the square with the same area, in pixels.
    pub sizes: Vec<f64>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
    /// Feature-map stride in pixels.
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![32.0, 64.0, 128.0, 256.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    /// Anchors per feature location.
    pub fn per_location(&self) -> usize {
        self.sizes.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidArgument(format!("anchor config: {m}")));
        if self.sizes.is_empty() || self.aspect_ratios.is_empty() {
            return bad("sizes and aspect ratios must be non-empty");
        }
        if self.sizes.iter().chain(&self.aspect_ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("sizes and aspect ratios must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        Ok(())
    }
}

/// Anchors in row-major location order, `(size, ratio)` inner order.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let stride = cfg.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.per_location());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = stride * (j as f64 + 0.5);
            let cy = stride * (i as f64 + 0.5);
            for &size in &cfg.sizes {
                for &ratio in &cfg.aspect_ratios {
                    let w = size / ratio.sqrt();
                    let h = size * ratio.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Where an anchor's repetition target came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GroundTruth,
    Teacher,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Regression target, only for anchors matched to an annotated box.
    pub delta: Option<BoxDelta>,
    /// Repetition target; `None` masks the repetition loss.
    pub repetition: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub targets: Vec<AnchorTarget>,
}

impl AnchorTargets {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn count_label(&self, label: AnchorLabel) -> usize {
        self.targets.iter().filter(|t| t.label == label).count()
    }

    pub fn count_provenance(&self, provenance: Provenance) -> usize {
        self.targets.iter().filter(|t| t.provenance == provenance).count()
    }
}

/// Labels every anchor against the annotated boxes, falling back to the
/// teacher for anchors that touch no annotated box at all.
///
/// `annotated` pairs each annotated box with the count of its class.
pub fn assign_anchor_targets(
    anchors: &[BBox],
    annotated: &[(BBox, f64)],
    teacher: Option<&dyn LabelTeacher>,
) -> AnchorTargets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best = vec![0.0f64; annotated.len()];
    let mut ious = vec![0.0f64; n * annotated.len()];

    for (a, anchor) in anchors.iter().enumerate() {
        for (g, (gt, _)) in annotated.iter().enumerate() {
            let v = iou(anchor, gt);
            ious[a * annotated.len() + g] = v;
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
            if v > gt_best[g] {
                gt_best[g] = v;
            }
        }
    }

    let mut positive: Vec<bool> = best_iou.iter().map(|&v| v > POSITIVE_IOU).collect();
    // Every annotated box claims its best anchors (ties included).
    for (g, &best) in gt_best.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for a in 0..n {
            if ious[a * annotated.len() + g] == best {
                positive[a] = true;
            }
        }
    }

    let targets = (0..n)
        .map(|a| {
            if positive[a] {
                let (gt, count) = annotated[best_gt[a]];
                AnchorTarget {
                    label: AnchorLabel::Positive,
                    delta: Some(encode_box(&gt, &anchors[a])),
                    repetition: Some(count),
                    provenance: Provenance::GroundTruth,
                }
            } else if best_iou[a] == 0.0 {
                match teacher {
                    Some(t) => {
                        let (is_object, count) = t.label(&anchors[a]);
                        AnchorTarget {
                            label: if is_object { AnchorLabel::Positive } else { AnchorLabel::Negative },
                            delta: None,
                            repetition: Some(count),
                            provenance: Provenance::Teacher,
                        }
                    }
                    None => AnchorTarget {
                        label: AnchorLabel::Negative,
                        delta: None,
                        repetition: None,
                        provenance: Provenance::GroundTruth,
                    },
                }
            } else if best_iou[a] < NEGATIVE_IOU {
                AnchorTarget {
                    label: AnchorLabel::Negative,
                    delta: None,
                    repetition: None,
                    provenance: Provenance::GroundTruth,
                }
            } else {
                AnchorTarget {
                    label: AnchorLabel::Ignore,
                    delta: None,
                    repetition: None,
                    provenance: Provenance::Ignore,
                }
            }
        })
        .collect();
    AnchorTargets { targets }
}

/// A decoded proposal with its two scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub repetition: f64,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKey {
    Objectness,
    Repetition,
}

impl ScoreKey {
    pub fn of(&self, p: &Proposal) -> f64 {
        match self {
            ScoreKey::Objectness => p.objectness,
            ScoreKey::Repetition => p.repetition,
        }
    }
}

/// Sorts proposals by descending key, ties broken by anchor index.
pub fn sort_by_key(proposals: &mut [Proposal], key: ScoreKey) {
    proposals.sort_by(|a, b| {
        key.of(b).total_cmp(&key.of(a)).then(a.anchor_index.cmp(&b.anchor_index))
    });
}

/// Greedy non-maximum suppression. A proposal is dropped when its IoU with an
/// already kept one exceeds `iou_thresh`.
pub fn nms(proposals: &[Proposal], iou_thresh: f64, key: ScoreKey) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sort_by_key(&mut sorted, key);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= iou_thresh) {
            kept.push(p);
        }
    }
    kept
}

/// Samples up to `batch / 2` positives and fills the rest with negatives.
///
/// Returns positive indices first, then negatives. Ignored anchors are never drawn.
pub fn sample_anchor_batch<R: Rng + ?Sized>(
    targets: &AnchorTargets,
    batch: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, t) in targets.targets.iter().enumerate() {
        match t.label {
            AnchorLabel::Positive => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let n_pos = pos.len().min(batch / 2);
    let n_neg = neg.len().min(batch - n_pos);
    let mut out: Vec<usize> = pos.choose_multiple(rng, n_pos).copied().collect();
    out.extend(neg.choose_multiple(rng, n_neg).copied());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    fn prop(bx: BBox, score: f64, idx: usize) -> Proposal {
        Proposal { bbox: bx, objectness: score, repetition: score, anchor_index: idx }
    }

    #[test]
    fn iou_fixtures() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &b(5.0, 0.0, 15.0, 10.0)), 1.0 / 3.0, epsilon = 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn encode_fixtures() {
        let anchor = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_box(&anchor, &anchor), BoxDelta::default());

        let shifted = encode_box(&b(10.0, 0.0, 20.0, 10.0), &anchor);
        assert_abs_diff_eq!(shifted.tx, 1.0);
        assert_abs_diff_eq!(shifted.ty, 0.0);
        assert_abs_diff_eq!(shifted.tw, 0.0);
        assert_abs_diff_eq!(shifted.th, 0.0);

        let wide = encode_box(&b(-5.0, 0.0, 15.0, 10.0), &anchor);
        assert_abs_diff_eq!(wide.tw, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn decode_fixtures() {
        let anchor = b(3.0, 4.0, 17.0, 9.0);
        assert_eq!(decode_box(&BoxDelta::default(), &anchor), anchor);

        let unit = b(0.0, 0.0, 10.0, 10.0);
        let moved = decode_box(&BoxDelta { tx: 1.0, ..Default::default() }, &unit);
        assert_eq!(moved.center(), (15.0, 5.0));
    }

    #[test]
    fn anchor_counts_and_shapes() {
        let cfg = AnchorConfig::default();
        assert_eq!(cfg.per_location(), 12);
        assert_eq!(generate_anchors(&cfg, 8, 8).len(), 768);

        let single = AnchorConfig { sizes: vec![32.0], aspect_ratios: vec![1.0], stride: 16 };
        assert_eq!(generate_anchors(&single, 1, 1), vec![b(-8.0, -8.0, 24.0, 24.0)]);

        let tall = AnchorConfig { sizes: vec![10.0], aspect_ratios: vec![4.0], stride: 16 };
        let a = generate_anchors(&tall, 1, 1)[0];
        assert_abs_diff_eq!(a.height(), 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.width(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn anchors_are_row_major_with_size_ratio_inner_order() {
        let cfg = AnchorConfig { sizes: vec![8.0, 16.0], aspect_ratios: vec![0.5, 2.0], stride: 4 };
        let anchors = generate_anchors(&cfg, 2, 3);
        // location (1, 2) is the sixth location; its first anchor is size 8, ratio 0.5
        let a = anchors[5 * 4];
        assert_eq!(a.center(), (10.0, 6.0));
        assert!(a.width() > a.height());
        assert_abs_diff_eq!(anchors[5 * 4 + 3].area(), 256.0, epsilon = 1e-9);
    }

    #[test]
    fn assignment_identity_anchor_is_positive() {
        let gt = b(10.0, 10.0, 40.0, 40.0);
        let anchors = vec![gt, b(100.0, 100.0, 130.0, 130.0)];
        let t = assign_anchor_targets(&anchors, &[(gt, 7.0)], None);
        let first = t.targets[0];
        assert_eq!(first.label, AnchorLabel::Positive);
        assert_eq!(first.delta, Some(BoxDelta::default()));
        assert_eq!(first.repetition, Some(7.0));
        assert_eq!(first.provenance, Provenance::GroundTruth);
        assert_eq!(t.targets[1].label, AnchorLabel::Negative);
        assert_eq!(t.targets[1].repetition, None);
    }

    #[test]
    fn assignment_mid_overlap_is_ignored() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        // IoU 0.5 with gt, and a perfect anchor takes the argmax clause
        let half = b(0.0, 0.0, 10.0, 20.0);
        assert_abs_diff_eq!(iou(&half, &gt), 0.5);
        let t = assign_anchor_targets(&[gt, half], &[(gt, 3.0)], None);
        assert_eq!(t.targets[1].label, AnchorLabel::Ignore);
        assert_eq!(t.targets[1].provenance, Provenance::Ignore);
    }

    #[test]
    fn assignment_partial_negative_masks_repetition() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let sliver = b(8.0, 0.0, 18.0, 10.0);
        let t = assign_anchor_targets(&[gt, sliver], &[(gt, 3.0)], None);
        let s = t.targets[1];
        assert_eq!(s.label, AnchorLabel::Negative);
        assert_eq!(s.repetition, None);
        assert_eq!(s.provenance, Provenance::GroundTruth);
    }

    #[test]
    fn argmax_clause_rescues_small_boxes() {
        let gt = b(0.0, 0.0, 4.0, 4.0);
        let anchors = vec![b(0.0, 0.0, 32.0, 32.0), b(40.0, 0.0, 72.0, 32.0)];
        let t = assign_anchor_targets(&anchors, &[(gt, 2.0)], None);
        assert_eq!(t.targets[0].label, AnchorLabel::Positive);
    }

    #[test]
    fn no_annotations_no_teacher_is_all_negative() {
        let anchors = generate_anchors(&AnchorConfig::default(), 2, 2);
        let t = assign_anchor_targets(&anchors, &[], None);
        assert_eq!(t.count_label(AnchorLabel::Negative), anchors.len());
        assert!(t.targets.iter().all(|t| t.repetition.is_none()));
    }

    struct FixedTeacher;
    impl LabelTeacher for FixedTeacher {
        fn label(&self, anchor: &BBox) -> (bool, f64) {
            if anchor.x1 >= 100.0 {
                (true, 4.0)
            } else {
                (false, 0.0)
            }
        }
    }

    #[test]
    fn teacher_labels_disjoint_anchors() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![gt, b(100.0, 100.0, 110.0, 110.0), b(50.0, 50.0, 60.0, 60.0)];
        let t = assign_anchor_targets(&anchors, &[(gt, 9.0)], Some(&FixedTeacher));
        assert_eq!(t.targets[0].provenance, Provenance::GroundTruth);
        let unannotated = t.targets[1];
        assert_eq!(unannotated.label, AnchorLabel::Positive);
        assert_eq!(unannotated.repetition, Some(4.0));
        assert_eq!(unannotated.provenance, Provenance::Teacher);
        assert_eq!(unannotated.delta, None);
        assert_eq!(t.targets[2].label, AnchorLabel::Negative);
        assert_eq!(t.targets[2].repetition, Some(0.0));
    }

    #[test]
    fn nms_fixtures() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[prop(a, 0.5, 0)], 0.7, ScoreKey::Objectness).len(), 1);

        let kept = nms(&[prop(a, 0.8, 0), prop(a, 0.9, 1)], 0.7, ScoreKey::Objectness);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);

        // p0/p1 overlap at IoU 0.8; p2 overlaps each at 0.1 or less
        let p0 = b(0.0, 0.0, 10.0, 10.0);
        let p1 = b(0.0, 0.0, 10.0, 12.5);
        let p2 = b(9.0, 0.0, 19.0, 10.0);
        assert_abs_diff_eq!(iou(&p0, &p1), 0.8, epsilon = 1e-12);
        assert!(iou(&p0, &p2) <= 0.1 && iou(&p1, &p2) <= 0.1);
        let kept = nms(
            &[prop(p0, 0.9, 0), prop(p1, 0.8, 1), prop(p2, 0.7, 2)],
            0.5,
            ScoreKey::Repetition,
        );
        let ids: Vec<_> = kept.iter().map(|p| p.anchor_index).collect();
        assert_eq!(ids, vec![0, 2]);
    }

    fn labelled(n_pos: usize, n_neg: usize, n_ign: usize) -> AnchorTargets {
        let mk = |label| AnchorTarget { label, delta: None, repetition: None, provenance: Provenance::Ignore };
        let mut targets = vec![mk(AnchorLabel::Positive); n_pos];
        targets.extend(vec![mk(AnchorLabel::Negative); n_neg]);
        targets.extend(vec![mk(AnchorLabel::Ignore); n_ign]);
        AnchorTargets { targets }
    }

    #[test]
    fn sampling_half_and_half() {
        let t = labelled(100, 1000, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_anchor_batch(&t, 96, &mut rng);
        let pos = idx.iter().filter(|&&i| i < 100).count();
        assert_eq!((pos, idx.len() - pos), (48, 48));
        assert!(idx.iter().all(|&i| i < 1100));
    }

    #[test]
    fn sampling_pads_with_negatives() {
        let t = labelled(10, 1000, 0);
        let idx = sample_anchor_batch(&t, 96, &mut ChaCha8Rng::seed_from_u64(2));
        let pos = idx.iter().filter(|&&i| i < 10).count();
        assert_eq!((pos, idx.len() - pos), (10, 86));
        let mut dedup = idx.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), idx.len());
    }

    #[test]
    fn sampling_is_seeded_and_empty_when_all_ignored() {
        let t = labelled(30, 300, 0);
        let a = sample_anchor_batch(&t, 96, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_anchor_batch(&t, 96, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let ignored = labelled(0, 0, 20);
        assert!(sample_anchor_batch(&ignored, 96, &mut ChaCha8Rng::seed_from_u64(9)).is_empty());
    }
}
