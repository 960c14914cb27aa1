//! Annotated images, the synthetic scene generator, and the dataset file format.
//!
//! A dataset directory holds one PNG per image plus `annotations.json`, a
//! single document mapping image file names to records:
//!
//! ```json
//! { "scene_0000.png": { "class": 0,
//!                       "points": [[12.0, 40.5], ...],
//!                       "box_examples": [[x1, y1, x2, y2], ...],
//!                       "hidden_gt": { ... } } }
//! ```
//!
//! Records shaped like the FSC-147 annotation file (`box_examples_coordinates`
//! holding four corner points per box, no class, no hidden ground truth) are
//! accepted as well.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::density::{Dot, DotMap};
use crate::geometry::{iou, BBox};
use crate::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const EXEMPLARS_PER_IMAGE: usize = 3;

/// Every instance of one class, including the ones the visible annotation omits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenClass {
    pub class: u32,
    pub boxes: Vec<BBox>,
    pub dots: DotMap,
}

impl HiddenClass {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }
}

/// Complete ground truth of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HiddenGt {
    pub classes: Vec<HiddenClass>,
}

impl HiddenGt {
    pub fn total_instances(&self) -> usize {
        self.classes.iter().map(HiddenClass::count).sum()
    }

    pub fn class(&self, id: u32) -> Option<&HiddenClass> {
        self.classes.iter().find(|c| c.class == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub name: String,
    pub image: RgbImage,
    pub annotated_class: u32,
    pub exemplar_boxes: Vec<BBox>,
    /// Dots for every instance of the annotated class.
    pub dots: DotMap,
    pub hidden_gt: Option<HiddenGt>,
}

impl AnnotatedImage {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn gt_count(&self) -> usize {
        self.dots.len()
    }

    /// One box per dot, sized like the average exemplar.
    pub fn annotated_boxes(&self) -> Vec<BBox> {
        expand_dots_to_boxes(&self.dots, &self.exemplar_boxes, self.width(), self.height())
    }
}

/// Places a box of the mean exemplar width and height on each dot, clipped to the image.
pub fn expand_dots_to_boxes(dots: &[Dot], exemplars: &[BBox], width: usize, height: usize) -> Vec<BBox> {
    assert!(!exemplars.is_empty(), "at least one exemplar box is required");
    let n = exemplars.len() as f64;
    let mw = exemplars.iter().map(BBox::width).sum::<f64>() / n;
    let mh = exemplars.iter().map(BBox::height).sum::<f64>() / n;
    dots.iter()
        .filter_map(|d| BBox::from_center(d.x, d.y, mw, mh).clip(width as f64, height as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Drawn uniformly per scene when absent.
    #[serde(default)]
    pub shape: Option<ShapeKind>,
    /// Inclusive range of the instance side length in pixels.
    pub size_range: (f64, f64),
    /// Inclusive range of the instance count.
    pub count_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    /// Index into `classes` of the one class that gets annotated.
    #[serde(default)]
    pub annotated_class: usize,
    /// Largest IoU allowed between two instances.
    #[serde(default)]
    pub max_overlap: f64,
    /// Amplitude of the uniform per-pixel noise, in `[0, 1]` intensity units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_noise() -> f64 {
    0.05
}

fn default_retries() -> usize {
    1000
}

impl SceneSpec {
    /// 192-pixel scenes of 5 to 30 single-class instances, 18 to 26 pixels
    /// across, so every instance spans more than one 16-pixel feature cell.
    pub fn desk() -> Self {
        SceneSpec::single_class(192, (5, 30), (18.0, 26.0))
    }

    pub fn single_class(size: usize, count_range: (usize, usize), size_range: (f64, f64)) -> Self {
        SceneSpec {
            width: size,
            height: size,
            classes: vec![ClassSpec { shape: None, size_range, count_range }],
            annotated_class: 0,
            max_overlap: 0.0,
            noise: default_noise(),
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.classes.is_empty() || self.classes.len() > 3 {
            return bad(format!("1 to 3 classes supported, got {}", self.classes.len()));
        }
        if self.annotated_class >= self.classes.len() {
            return bad(format!("annotated class {} does not exist", self.annotated_class));
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            let (lo, hi) = c.size_range;
            if !(lo >= 1.0 && hi >= lo) || hi >= self.width.min(self.height) as f64 {
                return bad(format!("class {i}: bad size range ({lo}, {hi})"));
            }
            if c.count_range.0 < 1 || c.count_range.1 < c.count_range.0 {
                return bad(format!("class {i}: counts must satisfy 1 <= min <= max"));
            }
        }
        Ok(())
    }
}

/// A batch of scenes drawn from one template, as read by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub scene: SceneSpec,
    #[serde(default)]
    pub seed: u64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn covers(shape: ShapeKind, bx: &BBox, px: f64, py: f64) -> bool {
    let (cx, cy) = bx.center();
    match shape {
        ShapeKind::Square => bx.contains_point(px, py),
        ShapeKind::Circle => {
            let r = 0.5 * bx.width();
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at top center, base along the bottom edge
            if py < bx.y1 || py > bx.y2 {
                return false;
            }
            let half = 0.5 * bx.width() * (py - bx.y1) / bx.height();
            (px - cx).abs() <= half
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Draws one synthetic scene. The visible annotation covers only the
/// annotated class; `hidden_gt` records every instance of every class.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, name: &str, rng: &mut R) -> Result<AnnotatedImage> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let base_hue = rng.random_range(0.0..360.0);
    let n_classes = spec.classes.len();

    let mut placed: Vec<BBox> = Vec::new();
    let mut classes = Vec::with_capacity(n_classes);
    let mut instances: Vec<(ShapeKind, BBox, [f64; 3])> = Vec::new();
    for (ci, cs) in spec.classes.iter().enumerate() {
        let shape = cs.shape.unwrap_or_else(|| *SHAPES.choose(rng).expect("non-empty"));
        let hue = base_hue + 360.0 * ci as f64 / n_classes as f64;
        let color = hsv_to_rgb(hue, rng.random_range(0.6..0.9), rng.random_range(0.75..0.95));
        let count = rng.random_range(cs.count_range.0..=cs.count_range.1);
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = None;
            for _ in 0..spec.max_retries {
                let s = rng.random_range(cs.size_range.0..=cs.size_range.1);
                let cx = rng.random_range(0.5 * s..=w - 0.5 * s);
                let cy = rng.random_range(0.5 * s..=h - 0.5 * s);
                let cand = BBox::from_center(cx, cy, s, s);
                if placed.iter().all(|p| iou(p, &cand) <= spec.max_overlap) {
                    ok = Some(cand);
                    break;
                }
            }
            let bx = ok.ok_or(Error::Placement { class: ci, retries: spec.max_retries })?;
            placed.push(bx);
            boxes.push(bx);
            let jitter = rng.random_range(0.9..1.1);
            instances.push((shape, bx, color.map(|c| c * jitter)));
        }
        let dots = boxes.iter().map(|b| {
            let (x, y) = b.center();
            Dot { x, y }
        });
        classes.push(HiddenClass { class: ci as u32, dots: dots.collect(), boxes });
    }

    let bg = rng.random_range(0.15..0.45);
    let mut image = RgbImage::new(spec.width as u32, spec.height as u32);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = [bg; 3];
        for (shape, bx, color) in &instances {
            if bx.contains_point(fx, fy) && covers(*shape, bx, fx, fy) {
                c = *color;
                break;
            }
        }
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = to_u8(c[k] + rng.random_range(-spec.noise..=spec.noise));
        }
        *px = Rgb(out);
    }

    let annotated = &classes[spec.annotated_class];
    let exemplar_boxes: Vec<BBox> = if annotated.count() >= EXEMPLARS_PER_IMAGE {
        annotated.boxes.choose_multiple(rng, EXEMPLARS_PER_IMAGE).copied().collect()
    } else {
        (0..EXEMPLARS_PER_IMAGE).map(|_| *annotated.boxes.choose(rng).expect("count >= 1")).collect()
    };
    Ok(AnnotatedImage {
        name: name.to_string(),
        image,
        annotated_class: annotated.class,
        exemplar_boxes,
        dots: annotated.dots.clone(),
        hidden_gt: Some(HiddenGt { classes }),
    })
}

/// Generates `spec.scenes` scenes named `scene_0000.png`, `scene_0001.png`, ...
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<AnnotatedImage>> {
    use rand::SeedableRng;
    (0..spec.scenes)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            generate_scene(&spec.scene, &format!("scene_{i:04}.png"), &mut rng)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    class: u32,
    points: Vec<[f64; 2]>,
    box_examples: Vec<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_gt: Option<&'a HiddenGt>,
}

pub fn save_dataset(images: &[AnnotatedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = BTreeMap::new();
    for img in images {
        let path = dir.join(&img.name);
        img.image.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
        doc.insert(
            img.name.as_str(),
            RecordOut {
                class: img.annotated_class,
                points: img.dots.iter().map(|d| [d.x, d.y]).collect(),
                box_examples: img.exemplar_boxes.iter().map(BBox::as_array).collect(),
                hidden_gt: img.hidden_gt.as_ref(),
            },
        );
    }
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("annotations serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Annotation part of a record, without the raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub class: u32,
    pub dots: DotMap,
    pub exemplar_boxes: Vec<BBox>,
    pub hidden_gt: Option<HiddenGt>,
}

fn field<'a>(rec: &'a Value, name: &str, key: &str) -> Result<&'a Value> {
    rec.get(key).ok_or_else(|| Error::schema(format!("{name}.{key}"), "missing"))
}

fn number(v: &Value, at: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::schema(at, "expected a number"))
}

fn array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::schema(at, "expected an array"))
}

/// Parses one annotation record, naming the offending field on failure.
pub fn parse_record(name: &str, rec: &Value) -> Result<Annotation> {
    let class = match rec.get("class") {
        None | Some(Value::Null) => 0,
        Some(v) => v
            .as_u64()
            .map(|c| c as u32)
            .ok_or_else(|| Error::schema(format!("{name}.class"), "expected a class id"))?,
    };

    let mut dots = Vec::new();
    for (i, p) in array(field(rec, name, "points")?, &format!("{name}.points"))?.iter().enumerate() {
        let at = format!("{name}.points[{i}]");
        let xy = array(p, &at)?;
        if xy.len() != 2 {
            return Err(Error::schema(at, "expected [x, y]"));
        }
        dots.push(Dot { x: number(&xy[0], &at)?, y: number(&xy[1], &at)? });
    }

    let mut exemplar_boxes = Vec::new();
    if let Some(v) = rec.get("box_examples") {
        for (i, b) in array(v, &format!("{name}.box_examples"))?.iter().enumerate() {
            let at = format!("{name}.box_examples[{i}]");
            let c = array(b, &at)?;
            if c.len() != 4 {
                return Err(Error::schema(at, "expected [x1, y1, x2, y2]"));
            }
            let v: Vec<f64> = c.iter().map(|x| number(x, &at)).collect::<Result<_>>()?;
            let bx = BBox::try_new(v[0], v[1], v[2], v[3]).ok_or_else(|| Error::schema(&at, "degenerate box"))?;
            exemplar_boxes.push(bx);
        }
    } else if let Some(v) = rec.get("box_examples_coordinates") {
        for (i, b) in array(v, &format!("{name}.box_examples_coordinates"))?.iter().enumerate() {
            let at = format!("{name}.box_examples_coordinates[{i}]");
            let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for corner in array(b, &at)? {
                let xy = array(corner, &at)?;
                if xy.len() != 2 {
                    return Err(Error::schema(at, "expected corner [x, y]"));
                }
                let (x, y) = (number(&xy[0], &at)?, number(&xy[1], &at)?);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
            let bx = BBox::try_new(x1, y1, x2, y2).ok_or_else(|| Error::schema(&at, "degenerate box"))?;
            exemplar_boxes.push(bx);
        }
    } else {
        return Err(Error::schema(format!("{name}.box_examples"), "missing"));
    }
    if exemplar_boxes.is_empty() {
        return Err(Error::schema(format!("{name}.box_examples"), "no exemplar boxes"));
    }

    let hidden_gt = match rec.get("hidden_gt") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| Error::schema(format!("{name}.hidden_gt"), e.to_string()))?,
        ),
    };
    Ok(Annotation { class, dots, exemplar_boxes, hidden_gt })
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    let obj = doc.as_object().ok_or_else(|| Error::schema("<root>", "expected an object of records"))?;
    obj.iter().map(|(name, rec)| Ok((name.clone(), parse_record(name, rec)?))).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let annotations = load_annotations(&dir.join(ANNOTATION_FILE))?;
    annotations
        .into_iter()
        .map(|(name, a)| {
            let path = dir.join(&name);
            let image = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
            Ok(AnnotatedImage {
                name,
                image,
                annotated_class: a.class,
                exemplar_boxes: a.exemplar_boxes,
                dots: a.dots,
                hidden_gt: a.hidden_gt,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn two_class_spec() -> SceneSpec {
        SceneSpec {
            width: 96,
            height: 96,
            classes: vec![
                ClassSpec { shape: Some(ShapeKind::Circle), size_range: (8.0, 12.0), count_range: (12, 12) },
                ClassSpec { shape: Some(ShapeKind::Square), size_range: (8.0, 12.0), count_range: (5, 5) },
            ],
            annotated_class: 0,
            max_overlap: 0.0,
            noise: 0.05,
            max_retries: 1000,
        }
    }

    #[test]
    fn expansion_uses_mean_exemplar_size() {
        let dots = vec![Dot { x: 50.0, y: 50.0 }, Dot { x: 20.0, y: 70.0 }];
        let uniform = vec![BBox::new(0.0, 0.0, 10.0, 20.0); 3];
        for (b, d) in expand_dots_to_boxes(&dots, &uniform, 100, 100).iter().zip(&dots) {
            assert_abs_diff_eq!(b.width(), 10.0);
            assert_abs_diff_eq!(b.height(), 20.0);
            assert_eq!(b.center(), (d.x, d.y));
        }

        let mixed = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 30.0, 10.0)];
        let b = expand_dots_to_boxes(&dots[..1], &mixed, 100, 100)[0];
        assert_abs_diff_eq!(b.width(), 20.0);
        assert_abs_diff_eq!(b.height(), 10.0);

        let square = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let corner = expand_dots_to_boxes(&[Dot { x: 1.0, y: 1.0 }], &square, 100, 100)[0];
        assert_eq!((corner.x1, corner.y1), (0.0, 0.0));
        assert!(corner.width() <= 10.0);
    }

    #[test]
    fn single_class_scene_echoes_count() {
        let spec = SceneSpec::single_class(64, (9, 9), (6.0, 9.0));
        let s = generate_scene(&spec, "a.png", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.dots.len(), 9);
        assert_eq!(s.hidden_gt.as_ref().unwrap().classes[0].count(), 9);
        assert_eq!(s.exemplar_boxes.len(), 3);
        for b in &s.exemplar_boxes {
            assert!(s.dots.iter().any(|d| b.contains_point(d.x, d.y)));
        }
    }

    #[test]
    fn two_class_scene_annotates_one_class() {
        let s = generate_scene(&two_class_spec(), "b.png", &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s.dots.len(), 12);
        let hidden = s.hidden_gt.unwrap();
        assert_eq!(hidden.total_instances(), 17);
        assert_eq!(hidden.class(1).unwrap().count(), 5);
        assert_eq!(hidden.class(0).unwrap().dots, s.dots);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = two_class_spec();
        let a = generate_scene(&spec, "c.png", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_scene(&spec, "c.png", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a, b);
        let c = generate_scene(&spec, "c.png", &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }

    #[test]
    fn impossible_packing_fails() {
        let mut spec = SceneSpec::single_class(32, (200, 200), (10.0, 10.0));
        spec.max_retries = 50;
        let err = generate_scene(&spec, "d.png", &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { scenes: 10, scene: two_class_spec(), seed: 5 };
        let scenes = generate_dataset(&spec).unwrap();
        save_dataset(&scenes, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn missing_exemplars_is_a_schema_error() {
        let rec = json!({ "points": [[1.0, 2.0]] });
        match parse_record("x.png", &rec) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "x.png.box_examples"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = json!({ "points": [[1.0]], "box_examples": [[0, 0, 4, 4]] });
        match parse_record("y.png", &bad) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "y.png.points[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fsc147_shaped_record_parses() {
        let rec = json!({
            "H": 384, "W": 512,
            "img_path": "2.jpg",
            "points": [[10.5, 20.0], [30.0, 40.0], [50.0, 60.0]],
            "box_examples_coordinates": [
                [[5, 15], [5, 25], [16, 25], [16, 15]],
                [[25, 35], [25, 45], [35, 45], [35, 35]],
                [[45, 55], [45, 65], [55, 65], [55, 55]]
            ]
        });
        let a = parse_record("2.jpg", &rec).unwrap();
        assert_eq!(a.dots.len(), 3);
        assert_eq!(a.exemplar_boxes[0], BBox::new(5.0, 15.0, 16.0, 25.0));
        assert!(a.hidden_gt.is_none());
        assert_eq!(a.class, 0);
    }
}
