//! Inference: backbone, proposal network, exemplar selection, and one density
//! map per exemplar. Also writes prediction artifacts.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::density::{count, write_density, DensityMap};
use crate::dpn::{center_channels, correlate, roi_pool, self_correlation, CorrelationSource, Dpn, DpnConfig};
use crate::features::{Backbone, FeatureMap, ToyBackbone};
use crate::geometry::{generate_anchors, BBox, Proposal, ScoreKey};
use crate::reprpn::{select_exemplars, RepRpn, RpnForward};
use crate::train::{load_dpn_checkpoint, load_rpn_checkpoint};
use crate::{Error, Result};

/// Overlay opacity of the density heatmap.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Features and proposals for one image.
pub struct Analysis {
    pub features: FeatureMap,
    pub forward: RpnForward,
    pub proposals: Vec<Proposal>,
    pub height: usize,
    pub width: usize,
}

impl Analysis {
    /// The map an exemplar is correlated against under `source`.
    pub fn image_side(&self, source: CorrelationSource) -> FeatureMap {
        match source {
            CorrelationSource::Backbone => self.features.clone(),
            CorrelationSource::Encoder => FeatureMap { values: self.forward.encoded_map(), stride: self.features.stride },
        }
    }
}

/// Correlation map of an exemplar box under a DPN configuration.
pub fn exemplar_correlation(analysis: &Analysis, bx: &BBox, cfg: &DpnConfig) -> Result<Array2<f64>> {
    let prep = |fm: FeatureMap| if cfg.center { center_channels(&fm) } else { fm };
    let backbone = prep(analysis.features.clone());
    let ex = roi_pool(&backbone, bx, cfg.roi_size);
    let corr = match cfg.correlation_source {
        CorrelationSource::Backbone => correlate(&backbone, &ex)?,
        CorrelationSource::Encoder => correlate(&prep(analysis.image_side(CorrelationSource::Encoder)), &ex)?,
    };
    if !cfg.self_normalize {
        return Ok(corr);
    }
    let energy = self_correlation(&ex);
    Ok(if energy > SELF_NORM_FLOOR { corr / energy } else { corr })
}

/// Exemplars with less self-correlation than this are left unnormalized.
const SELF_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPrediction {
    pub proposal: Proposal,
    /// `None` when no density network is loaded.
    pub density: Option<DensityMap>,
}

impl ExemplarPrediction {
    /// Sum of the stored (single-precision) density map.
    pub fn dpn_count(&self) -> Option<f64> {
        self.density.as_ref().map(count)
    }
}

pub struct Counter {
    pub backbone: ToyBackbone,
    pub rpn: RepRpn,
    pub dpn: Option<Dpn>,
    pub select_by: ScoreKey,
    pub nms_iou: f64,
}

impl Counter {
    pub fn new(backbone: ToyBackbone, rpn: RepRpn, dpn: Option<Dpn>, select_by: ScoreKey, nms_iou: f64) -> Result<Self> {
        if backbone.stride() != rpn.config.anchors.stride {
            return Err(Error::InvalidArgument(format!(
                "anchor stride {} does not match backbone stride {}",
                rpn.config.anchors.stride,
                backbone.stride()
            )));
        }
        if let Some(d) = &dpn {
            if d.config.correlation_source == CorrelationSource::Encoder && rpn.config.d != backbone.out_channels() {
                return Err(Error::InvalidArgument(format!(
                    "encoder correlation needs d ({}) equal to backbone channels ({})",
                    rpn.config.d,
                    backbone.out_channels()
                )));
            }
        }
        Ok(Counter { backbone, rpn, dpn, select_by, nms_iou })
    }

    /// Builds a counter from a stage-1 checkpoint and an optional stage-2 one.
    /// Selection settings come from the stage-1 training configuration.
    pub fn from_checkpoints(rpn_path: &Path, dpn_path: Option<&Path>) -> Result<Self> {
        let (backbone, rpn, meta) = load_rpn_checkpoint(rpn_path)?;
        let dpn = dpn_path.map(|p| load_dpn_checkpoint(p).map(|(d, _)| d)).transpose()?;
        Counter::new(backbone, rpn, dpn, meta.train.select_by, meta.train.nms_iou)
    }

    pub fn analyze(&self, image: &RgbImage) -> Result<Analysis> {
        let features = self.backbone.extract(image);
        let forward = self.rpn.forward(&features)?;
        let anchors = generate_anchors(&self.rpn.config.anchors, features.hf(), features.wf());
        let (width, height) = (image.width() as usize, image.height() as usize);
        let proposals = self.rpn.proposals(&forward.outputs, &anchors, width, height);
        Ok(Analysis { features, forward, proposals, height, width })
    }

    pub fn exemplars(&self, analysis: &Analysis, top_k: usize) -> Vec<Proposal> {
        select_exemplars(&analysis.proposals, top_k, self.nms_iou, self.select_by)
    }

    /// Density map for one exemplar, rounded to single precision as stored on disk.
    pub fn density(&self, analysis: &Analysis, bx: &BBox) -> Result<Option<DensityMap>> {
        let Some(dpn) = &self.dpn else { return Ok(None) };
        let corr = exemplar_correlation(analysis, bx, &dpn.config)?;
        Ok(Some(dpn.forward(&corr, analysis.height, analysis.width).density.quantized()))
    }

    pub fn predict(&self, image: &RgbImage, top_k: usize) -> Result<Vec<ExemplarPrediction>> {
        let analysis = self.analyze(image)?;
        self.exemplars(&analysis, top_k)
            .into_iter()
            .map(|p| Ok(ExemplarPrediction { density: self.density(&analysis, &p.bbox)?, proposal: p }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarOutput {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub repetition: f64,
    pub density_file: Option<PathBuf>,
    pub dpn_count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub image: PathBuf,
    pub exemplars: Vec<ExemplarOutput>,
    pub overlay: PathBuf,
}

/// Piecewise-linear blue-cyan-yellow-red ramp on `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
        out[c] = (v * 255.0).round() as u8;
    }
    out
}

fn draw_box(img: &mut RgbImage, bx: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = (bx.x1.floor() as i64).clamp(0, w - 1);
    let y1 = (bx.y1.floor() as i64).clamp(0, h - 1);
    let x2 = (bx.x2.ceil() as i64 - 1).clamp(0, w - 1);
    let y2 = (bx.y2.ceil() as i64 - 1).clamp(0, h - 1);
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

/// The input with exemplar boxes on the left; the input blended with the
/// max-normalized density heatmap on the right.
pub fn render_overlay(image: &RgbImage, density: Option<&DensityMap>, boxes: &[BBox]) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(2 * w, h);
    let mut left = image.clone();
    for bx in boxes {
        draw_box(&mut left, bx, Rgb([255, 255, 255]));
    }
    let peak = density.map_or(0.0, |z| z.values.iter().copied().fold(0.0, f64::max));
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x, y, *left.get_pixel(x, y));
            let base = image.get_pixel(x, y).0;
            let t = match density {
                Some(z) if peak > 0.0 => z.values[[y as usize, x as usize]] / peak,
                _ => 0.0,
            };
            let heat = colormap(t);
            let mix = |c: usize| ((1.0 - OVERLAY_ALPHA) * base[c] as f64 + OVERLAY_ALPHA * heat[c] as f64).round() as u8;
            out.put_pixel(w + x, y, Rgb([mix(0), mix(1), mix(2)]));
        }
    }
    out
}

/// Writes `<stem>_exemplar<i>.bin` density files and `<stem>_overlay.png`
/// into `out_dir`. The overlay shows the first exemplar's density.
pub fn write_prediction(image_path: &Path, image: &RgbImage, preds: &[ExemplarPrediction], out_dir: &Path) -> Result<PredictOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let mut exemplars = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let density_file = match &p.density {
            Some(z) => {
                let path = out_dir.join(format!("{stem}_exemplar{i}.bin"));
                write_density(z, &path)?;
                Some(path)
            }
            None => None,
        };
        exemplars.push(ExemplarOutput {
            bbox: p.proposal.bbox,
            objectness: p.proposal.objectness,
            repetition: p.proposal.repetition,
            density_file,
            dpn_count: p.dpn_count(),
        });
    }
    let overlay = out_dir.join(format!("{stem}_overlay.png"));
    let boxes: Vec<BBox> = preds.iter().map(|p| p.proposal.bbox).collect();
    let first = preds.first().and_then(|p| p.density.as_ref());
    render_overlay(image, first, &boxes).save(&overlay).map_err(|e| Error::Image { path: overlay.clone(), source: e })?;
    Ok(PredictOutput { image: image_path.to_path_buf(), exemplars, overlay })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [204, 0, 0]);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn overlay_layout() {
        let img = RgbImage::from_pixel(8, 6, Rgb([100, 100, 100]));
        let mut z = DensityMap::zeros(6, 8);
        z.values[[2, 3]] = 0.5;
        let out = render_overlay(&img, Some(&z), &[BBox::new(1.0, 1.0, 4.0, 4.0)]);
        assert_eq!(out.dimensions(), (16, 6));
        assert_eq!(out.get_pixel(1, 1).0, [255, 255, 255]);
        assert_eq!(out.get_pixel(0, 5).0, [100, 100, 100]);
        // peak pixel takes the top of the ramp at half opacity
        assert_eq!(out.get_pixel(8 + 3, 2).0, [152, 50, 50]);
        assert_eq!(out.get_pixel(8, 0).0, [50, 50, 114]);
    }
}
