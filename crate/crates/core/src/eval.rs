//! Top-k counting metrics and dataset evaluation.
//!
//! Among the first `k` exemplars, those overlapping a ground-truth box by at
//! least [`MATCH_IOU`] are averaged; when none qualify, all `k` are averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::geometry::{iou, BBox, Proposal};
use crate::pipeline::Counter;
use crate::train::{TargetStats, TeacherStats};
use crate::{Error, Result};

pub const MATCH_IOU: f64 = 0.3;

fn max_iou(bx: &BBox, gt: &[BBox]) -> f64 {
    gt.iter().map(|g| iou(bx, g)).fold(0.0, f64::max)
}

/// Count estimate from `(box, count)` pairs already in ranking order.
pub fn topk_count_estimate(proposals: &[(BBox, f64)], gt_boxes: &[BBox], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no proposals to count from".into()));
    }
    let top = &proposals[..k.min(proposals.len())];
    let kept: Vec<f64> = top.iter().filter(|(b, _)| max_iou(b, gt_boxes) >= MATCH_IOU).map(|(_, c)| *c).collect();
    let pool: Vec<f64> = if kept.is_empty() { top.iter().map(|(_, c)| *c).collect() } else { kept };
    Ok(pool.iter().sum::<f64>() / pool.len() as f64)
}

/// [`topk_count_estimate`] with each proposal's repetition score as its count.
pub fn fast_count(proposals: &[Proposal], gt_boxes: &[BBox], k: usize) -> Result<f64> {
    let pairs: Vec<(BBox, f64)> = proposals.iter().map(|p| (p.bbox, p.repetition)).collect();
    topk_count_estimate(&pairs, gt_boxes, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

/// Mean absolute and root mean squared error over `(truth, estimate)` pairs.
pub fn mae_rmse(pairs: &[(f64, f64)]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no records to score".into()));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(y, p)| (y - p).powi(2)).sum::<f64>() / n).sqrt();
    // the power-mean inequality can be lost to rounding when all errors are equal
    Ok(Metrics { mae, rmse: rmse.max(mae) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarReport {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub repetition: f64,
    pub dpn_count: Option<f64>,
    /// Best IoU with a ground-truth box.
    pub max_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub gt_count: usize,
    pub exemplars: Vec<ExemplarReport>,
    /// Estimate per `k`, keyed by `k`.
    pub dpn: BTreeMap<String, f64>,
    pub fast: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Density-network counts, keyed by `k`. Empty without a density network.
    pub dpn: BTreeMap<String, Metrics>,
    /// Repetition-score counts, keyed by `k`.
    pub fast: BTreeMap<String, Metrics>,
    pub images: Vec<ImageReport>,
    /// Images with no surviving proposal; they are left out of the metrics.
    pub skipped: Vec<String>,
    pub teacher_stats: Option<TeacherStats>,
    pub dpn_targets: Option<TargetStats>,
}

/// Scores every image for each `k`, using the expanded annotated boxes as ground truth.
pub fn evaluate(counter: &Counter, images: &[AnnotatedImage], ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k values must be positive".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let mut reports = Vec::with_capacity(images.len());
    let mut skipped = Vec::new();
    for img in images {
        let analysis = counter.analyze(&img.image)?;
        let chosen = counter.exemplars(&analysis, max_k);
        if chosen.is_empty() {
            log::warn!("{}: no proposals survive, excluded from metrics", img.name);
            skipped.push(img.name.clone());
            continue;
        }
        let gt = img.annotated_boxes();
        let mut exemplars = Vec::with_capacity(chosen.len());
        for p in &chosen {
            let dpn_count = counter.density(&analysis, &p.bbox)?.map(|z| crate::density::count(&z));
            exemplars.push(ExemplarReport {
                bbox: p.bbox,
                objectness: p.objectness,
                repetition: p.repetition,
                dpn_count,
                max_iou: max_iou(&p.bbox, &gt),
            });
        }
        let mut dpn = BTreeMap::new();
        let mut fast = BTreeMap::new();
        for &k in ks {
            fast.insert(k.to_string(), fast_count(&chosen, &gt, k)?);
            if counter.dpn.is_some() {
                let pairs: Vec<(BBox, f64)> =
                    exemplars.iter().map(|e| (e.bbox, e.dpn_count.expect("density network loaded"))).collect();
                dpn.insert(k.to_string(), topk_count_estimate(&pairs, &gt, k)?);
            }
        }
        reports.push(ImageReport { name: img.name.clone(), gt_count: img.gt_count(), exemplars, dpn, fast });
    }
    let metrics = |pick: fn(&ImageReport) -> &BTreeMap<String, f64>| -> Result<BTreeMap<String, Metrics>> {
        let mut out = BTreeMap::new();
        for &k in ks {
            let key = k.to_string();
            let pairs: Vec<(f64, f64)> =
                reports.iter().filter_map(|r| pick(r).get(&key).map(|&p| (r.gt_count as f64, p))).collect();
            if !pairs.is_empty() {
                out.insert(key, mae_rmse(&pairs)?);
            }
        }
        Ok(out)
    };
    Ok(EvalReport {
        ks: ks.to_vec(),
        dpn: metrics(|r| &r.dpn)?,
        fast: metrics(|r| &r.fast)?,
        images: reports,
        skipped,
        teacher_stats: None,
        dpn_targets: None,
    })
}

/// Pearson correlation coefficient; `None` when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Proposal whose IoU with the unit ground truth `(0,0,10,10)` is `v`.
    fn at_iou(v: f64) -> BBox {
        // shifting a 10x10 box right by s gives IoU (10-s)/(10+s)
        let s = 10.0 * (1.0 - v) / (1.0 + v);
        BBox::new(s, 0.0, s + 10.0, 10.0)
    }

    fn gt() -> Vec<BBox> {
        vec![BBox::new(0.0, 0.0, 10.0, 10.0)]
    }

    #[test]
    fn iou_helper() {
        for v in [0.9, 0.5, 0.35, 0.3, 0.1] {
            assert_abs_diff_eq!(iou(&at_iou(v), &gt()[0]), v, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_traced_estimates() {
        let p = [(at_iou(0.5), 9.0), (at_iou(0.4), 12.0), (at_iou(0.1), 100.0)];
        assert_eq!(topk_count_estimate(&p, &gt(), 3).unwrap(), 10.5);
        let q = [(at_iou(0.1), 4.0), (at_iou(0.2), 6.0)];
        assert_eq!(topk_count_estimate(&q, &gt(), 2).unwrap(), 5.0);
        assert_eq!(topk_count_estimate(&[(at_iou(0.9), 7.0)], &gt(), 1).unwrap(), 7.0);
        assert!(topk_count_estimate(&[], &gt(), 1).is_err());
        assert!(topk_count_estimate(&q, &gt(), 0).is_err());
    }

    fn prop(bx: BBox, repetition: f64, i: usize) -> Proposal {
        Proposal { bbox: bx, objectness: 0.5, repetition, anchor_index: i }
    }

    #[test]
    fn fast_count_fixtures() {
        assert_eq!(fast_count(&[prop(at_iou(0.8), 14.0, 0)], &gt(), 1).unwrap(), 14.0);
        let ps = [prop(at_iou(0.4), 30.0, 0), prop(at_iou(0.35), 10.0, 1), prop(BBox::new(50.0, 50.0, 60.0, 60.0), 2.0, 2)];
        assert_eq!(fast_count(&ps, &gt(), 3).unwrap(), 20.0);
    }

    #[test]
    fn metric_fixtures() {
        assert_eq!(mae_rmse(&[(10.0, 12.0)]).unwrap(), Metrics { mae: 2.0, rmse: 2.0 });
        let m = mae_rmse(&[(0.0, 3.0), (0.0, 4.0)]).unwrap();
        assert_eq!(m.mae, 3.5);
        assert_abs_diff_eq!(m.rmse, 12.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(mae_rmse(&[(5.0, 5.0), (1.0, 1.0)]).unwrap(), Metrics { mae: 0.0, rmse: 0.0 });
        assert!(mae_rmse(&[]).is_err());
    }

    #[test]
    fn pearson_fixtures() {
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..50)) {
            let m = mae_rmse(&pairs).unwrap();
            prop_assert!(m.rmse >= m.mae);
        }

        #[test]
        fn estimate_ignores_order_within_top_k(
            counts in prop::collection::vec(0.0..50.0f64, 1..6),
            ious in prop::collection::vec(0.0..0.95f64, 6),
            rot in 0usize..6,
        ) {
            let p: Vec<(BBox, f64)> = counts.iter().zip(&ious).map(|(&c, &v)| (at_iou(v), c)).collect();
            let k = p.len();
            let mut q = p.clone();
            q.rotate_left(rot % k);
            let a = topk_count_estimate(&p, &gt(), k).unwrap();
            let b = topk_count_estimate(&q, &gt(), k).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
