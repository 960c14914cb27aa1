//! Density maps: rendering from dot annotations, counting, and the on-disk format.
//!
//! A map is stored as row-major little-endian `f32` values in a `.bin` file
//! next to a `.hdr` text sidecar holding `{"h": .., "w": ..}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default Gaussian width in pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Kernel support radius in units of sigma.
pub const KERNEL_TRUNCATION: f64 = 4.0;

/// One point per object instance, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
}

pub type DotMap = Vec<Dot>;

/// Non-negative `h x w` field whose sum is an object count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Array2<f64>,
}

impl DensityMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        DensityMap { values: Array2::zeros((h, w)) }
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("density values must be finite and non-negative".into()));
        }
        Ok(DensityMap { values })
    }

    pub fn h(&self) -> usize {
        self.values.nrows()
    }

    pub fn w(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Values rounded through `f32`, matching what [`write_density`] stores.
    pub fn quantized(&self) -> DensityMap {
        DensityMap { values: self.values.mapv(|v| v as f32 as f64) }
    }
}

pub fn count(z: &DensityMap) -> f64 {
    z.values.sum()
}

/// Sums a truncated isotropic Gaussian per dot. Each kernel is renormalized
/// over the pixels it actually covers, so every dot contributes mass 1.
pub fn render_density(dots: &[Dot], h: usize, w: usize, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut values = Array2::<f64>::zeros((h, w));
    let radius = KERNEL_TRUNCATION * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::new();
    for d in dots {
        if !(d.x >= 0.0 && d.y >= 0.0 && d.x < w as f64 && d.y < h as f64) {
            return Err(Error::DotOutOfBounds { x: d.x, y: d.y, w, h });
        }
        // pixel (r, c) has its center at (c + 0.5, r + 0.5)
        let c0 = ((d.x - radius - 0.5).ceil().max(0.0)) as usize;
        let c1 = ((d.x + radius - 0.5).floor().min(w as f64 - 1.0)) as usize;
        let r0 = ((d.y - radius - 0.5).ceil().max(0.0)) as usize;
        let r1 = ((d.y + radius - 0.5).floor().min(h as f64 - 1.0)) as usize;
        kernel.clear();
        let mut mass = 0.0;
        for r in r0..=r1 {
            let dy = r as f64 + 0.5 - d.y;
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - d.x;
                let v = (-(dx * dx + dy * dy) * inv).exp();
                mass += v;
                kernel.push((r, c, v));
            }
        }
        if mass > 0.0 {
            for &(r, c, v) in &kernel {
                values[[r, c]] += v / mass;
            }
        } else {
            // kernel narrower than a pixel
            values[[d.y as usize, d.x as usize]] += 1.0;
        }
    }
    Ok(DensityMap { values })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    h: usize,
    w: usize,
}

pub fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("hdr")
}

/// Writes `path` (binary values) and its `.hdr` sidecar.
pub fn write_density(z: &DensityMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(z.values.len() * 4);
    for v in z.values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let hdr = header_path(path);
    let text = serde_json::to_string(&Header { h: z.h(), w: z.w() }).expect("header serializes");
    fs::write(&hdr, text + "\n").map_err(|e| Error::io(&hdr, e))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let hdr: Header =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: hdr_path.clone(), source: e })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != hdr.h * hdr.w * 4 {
        return Err(Error::schema(
            "values",
            format!("{} bytes for a {}x{} map", bytes.len(), hdr.h, hdr.w),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((hdr.h, hdr.w), data).expect("length checked");
    Ok(DensityMap { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dot(x: f64, y: f64) -> Dot {
        Dot { x, y }
    }

    #[test]
    fn empty_dots_render_zero() {
        let z = render_density(&[], 16, 20, 2.0).unwrap();
        assert_eq!(z.shape(), (16, 20));
        assert_eq!(count(&z), 0.0);
    }

    #[test]
    fn interior_dot_has_unit_mass_and_peaks_at_dot() {
        let z = render_density(&[dot(32.5, 20.5)], 64, 64, 2.0).unwrap();
        assert_abs_diff_eq!(count(&z), 1.0, epsilon = 1e-3);
        let (mut best, mut at) = (0.0, (0, 0));
        for ((r, c), v) in z.values.indexed_iter() {
            if *v > best {
                best = *v;
                at = (r, c);
            }
        }
        assert_eq!(at, (20, 32));
    }

    #[test]
    fn corner_dots_keep_unit_mass() {
        let dots = [dot(0.0, 0.0), dot(31.99, 0.0), dot(0.0, 23.99), dot(31.99, 23.99)];
        let z = render_density(&dots, 24, 32, 3.0).unwrap();
        assert_abs_diff_eq!(count(&z), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn counts_fixtures() {
        let dots: Vec<Dot> = (0..57).map(|i| dot((i * 7 % 40) as f64 + 0.3, (i * 3 % 30) as f64)).collect();
        let z = render_density(&dots, 30, 40, 2.0).unwrap();
        assert_abs_diff_eq!(count(&z), 57.0, epsilon = 1e-3);

        let twelve: Vec<Dot> = (0..12).map(|i| dot(i as f64 * 2.5, 5.0)).collect();
        assert_abs_diff_eq!(count(&render_density(&twelve, 10, 30, 1.5).unwrap()), 12.0, epsilon = 1e-3);

        let uniform = DensityMap { values: Array2::from_elem((10, 10), 0.05) };
        assert_abs_diff_eq!(count(&uniform), 5.0, epsilon = 1e-12);
        assert_eq!(count(&DensityMap::zeros(3, 3)), 0.0);
    }

    #[test]
    fn rejects_outside_dots_and_bad_sigma() {
        assert!(matches!(
            render_density(&[dot(10.0, 2.0)], 8, 10, 2.0),
            Err(Error::DotOutOfBounds { .. })
        ));
        assert!(render_density(&[dot(-0.1, 2.0)], 8, 10, 2.0).is_err());
        assert!(render_density(&[], 8, 10, 0.0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let z = render_density(&[dot(3.0, 4.0), dot(9.5, 1.0)], 12, 14, 1.0).unwrap();
        write_density(&z, &path).unwrap();
        let back = read_density(&path).unwrap();
        assert_eq!(back, z.quantized());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 * 14 * 4);
        let hdr = std::fs::read_to_string(header_path(&path)).unwrap();
        assert_eq!(hdr.trim(), r#"{"h":12,"w":14}"#);
    }

    fn dots_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<Dot>> {
        prop::collection::vec(
            (0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| Dot { x, y }),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn render_conserves_count(dots in dots_strategy(24, 36), sigma in 0.5f64..4.0) {
            let z = render_density(&dots, 24, 36, sigma).unwrap();
            prop_assert!((count(&z) - dots.len() as f64).abs() < 1e-3);
            prop_assert!(z.values.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn render_is_additive_and_order_free(a in dots_strategy(20, 20), b in dots_strategy(20, 20)) {
            let both: Vec<Dot> = a.iter().chain(&b).copied().collect();
            let mut rev = both.clone();
            rev.reverse();
            let za = render_density(&a, 20, 20, 2.0).unwrap();
            let zb = render_density(&b, 20, 20, 2.0).unwrap();
            let zab = render_density(&both, 20, 20, 2.0).unwrap();
            let zrev = render_density(&rev, 20, 20, 2.0).unwrap();
            for ((x, y), (p, q)) in zab.values.iter().zip(zrev.values.iter()).zip(za.values.iter().zip(zb.values.iter())) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((x - (p + q)).abs() < 1e-12);
            }
        }
    }
}
