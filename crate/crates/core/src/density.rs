//! Ground-truth density maps from point annotations, and the annotation
//! file format.
//!
//! Every point contributes one truncated Gaussian (support radius `⌈3σ⌉`)
//! that is renormalized after clipping to the image, so each point adds
//! exactly one unit of mass wherever it sits. Maps are generated at image
//! resolution and block-summed to the requested output scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::imageio::RoiMask;
use crate::kernels;

pub const SIGMA_MIN: f64 = 0.5;
pub const SIGMA_MAX: f64 = 15.0;

/// Region of interest attached to an annotation: the path as written in the
/// annotation file plus the decoded mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub path: String,
    pub mask: RoiMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Object centers `(x, y)` in pixels, inside `[0, width) × [0, height)`.
    pub points: Vec<(f64, f64)>,
    pub roi: Option<Roi>,
}

impl PointAnnotation {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        let ann = PointAnnotation {
            image_id: image_id.into(),
            width,
            height,
            points,
            roi: None,
        };
        ann.validate().map_err(|(loc, detail)| CodaError::Annotation {
            source_name: ann.image_id.clone(),
            location: loc,
            detail,
        })?;
        Ok(ann)
    }

    fn validate(&self) -> Result<(), (String, String)> {
        if self.width == 0 || self.height == 0 {
            return Err(("width/height".into(), "image size must be ≥ 1".into()));
        }
        for (j, &(x, y)) in self.points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..self.width as f64).contains(&x)
                && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err((
                    format!("points[{j}]"),
                    format!(
                        "point ({x}, {y}) outside [0, {}) × [0, {})",
                        self.width, self.height
                    ),
                ));
            }
        }
        if let Some(roi) = &self.roi {
            if (roi.mask.height(), roi.mask.width()) != (self.height, self.width) {
                return Err((
                    "roi".into(),
                    format!(
                        "mask {}×{} does not match image {}×{}",
                        roi.mask.height(),
                        roi.mask.width(),
                        self.height,
                        self.width
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Number of points inside the half-open rectangle `[x0, x1) × [y0, y1)`.
    pub fn count_in(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> usize {
        self.points
            .iter()
            .filter(|&&(x, y)| x >= x0 && x < x1 && y >= y0 && y < y1)
            .count()
    }
}

/// Kernel width selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaMode {
    Fixed { sigma: f64 },
    /// `σ_i = β ·` mean distance to the `k` nearest other points; falls back
    /// to `fallback_sigma` for fewer than two points.
    Adaptive { k: usize, beta: f64, fallback_sigma: f64 },
}

impl SigmaMode {
    pub fn adaptive_default() -> Self {
        SigmaMode::Adaptive {
            k: 3,
            beta: 0.3,
            fallback_sigma: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SigmaMode::Fixed { sigma } => sigma > 0.0 && sigma.is_finite(),
            SigmaMode::Adaptive { k, beta, fallback_sigma } => {
                k >= 1 && beta > 0.0 && fallback_sigma > 0.0 && fallback_sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CodaError::invalid("sigma_mode", format!("{self:?}")))
        }
    }

    /// Per-point kernel widths for `points`.
    pub fn sigmas(&self, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match *self {
            SigmaMode::Fixed { sigma } => vec![sigma; points.len()],
            SigmaMode::Adaptive { k, beta, fallback_sigma } => {
                if points.len() < 2 {
                    vec![fallback_sigma; points.len()]
                } else {
                    adaptive_sigma(points, k.min(points.len() - 1), beta)?
                }
            }
        })
    }
}

/// Geometry-adaptive kernel widths: `β` times the mean distance to each
/// point's `k` nearest neighbors, clamped to `[SIGMA_MIN, SIGMA_MAX]`.
pub fn adaptive_sigma(points: &[(f64, f64)], k: usize, beta: f64) -> Result<Vec<f64>> {
    if k == 0 || points.len() < k + 1 {
        return Err(CodaError::invalid(
            "adaptive_sigma",
            format!("need at least k+1 = {} points, got {}", k + 1, points.len()),
        ));
    }
    let mut dists = Vec::with_capacity(points.len() - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &(xi, yi))| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &(xj, yj))| (xi - xj).hypot(yi - yj)),
            );
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mut nearest = dists[..k].to_vec();
            nearest.sort_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / k as f64;
            (beta * mean).clamp(SIGMA_MIN, SIGMA_MAX)
        })
        .collect())
}

/// Render unit-mass truncated Gaussians onto an `height × width` grid.
pub fn splat_gaussians(points: &[(f64, f64)], sigmas: &[f64], height: usize, width: usize) -> DenseGrid {
    assert_eq!(points.len(), sigmas.len());
    let mut map = DenseGrid::zeros([1, 1, height, width]);
    let mut weights = Vec::new();
    for (&(x, y), &sigma) in points.iter().zip(sigmas) {
        let radius = (3.0 * sigma).ceil() as isize;
        let (cx, cy) = (x.floor() as isize, y.floor() as isize);
        // offset of the point from the center of its own pixel
        let (fx, fy) = (x - cx as f64 - 0.5, y - cy as f64 - 0.5);
        let y_lo = (cy - radius).max(0);
        let y_hi = (cy + radius).min(height as isize - 1);
        let x_lo = (cx - radius).max(0);
        let x_hi = (cx + radius).min(width as isize - 1);
        let denom = 2.0 * sigma * sigma;
        weights.clear();
        let mut total = 0.0;
        for py in y_lo..=y_hi {
            let dy = (py - cy) as f64 - fy;
            for px in x_lo..=x_hi {
                let dx = (px - cx) as f64 - fx;
                let w = (-(dx * dx + dy * dy) / denom).exp();
                total += w;
                weights.push(w);
            }
        }
        if total <= 0.0 {
            // σ so small that every tap underflowed: all mass on the home pixel
            let i = map.index(0, 0, cy as usize, cx as usize);
            map.data_mut()[i] += 1.0;
            continue;
        }
        let mut it = weights.iter();
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let i = map.index(0, 0, py as usize, px as usize);
                map.data_mut()[i] += it.next().unwrap() / total;
            }
        }
    }
    map
}

/// A single-channel ground-truth density map.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: DenseGrid,
    /// Downsampling factor relative to the image.
    pub scale_factor: usize,
}

/// Ground-truth density for an annotation, block-summed by `out_scale`.
/// Image sizes not divisible by `out_scale` are zero-extended at the bottom
/// and right first, so the output is `⌈H/s⌉ × ⌈W/s⌉` and mass is preserved.
pub fn generate_density(ann: &PointAnnotation, mode: SigmaMode, out_scale: usize) -> Result<DensityMap> {
    if ![1, 2, 4, 8].contains(&out_scale) {
        return Err(CodaError::invalid(
            "generate_density",
            format!("out_scale must be 1, 2, 4 or 8, got {out_scale}"),
        ));
    }
    let sigmas = mode.sigmas(&ann.points)?;
    let h = ann.height.div_ceil(out_scale) * out_scale;
    let w = ann.width.div_ceil(out_scale) * out_scale;
    let mut full = splat_gaussians(&ann.points, &sigmas, ann.height, ann.width);
    if (h, w) != (ann.height, ann.width) {
        let mut padded = DenseGrid::zeros([1, 1, h, w]);
        for y in 0..ann.height {
            for x in 0..ann.width {
                padded.set(0, 0, y, x, full.at(0, 0, y, x));
            }
        }
        full = padded;
    }
    Ok(DensityMap {
        grid: kernels::block_sum_forward(&full, out_scale)?,
        scale_factor: out_scale,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image_id: String,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roi: Option<String>,
}

/// Parse an annotation file. ROI paths are resolved relative to `base_dir`.
pub fn parse_annotations(text: &str, source_name: &str, base_dir: &Path) -> Result<Vec<PointAnnotation>> {
    let records: Vec<AnnotationRecord> = serde_json::from_str(text).map_err(|e| CodaError::Annotation {
        source_name: source_name.to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let fail = |location: String, detail: String| CodaError::Annotation {
                source_name: source_name.to_string(),
                location: format!("entry {i} (\"{}\") {location}", r.image_id),
                detail,
            };
            let roi = match &r.roi {
                None => None,
                Some(p) => {
                    let mask = RoiMask::load(base_dir.join(p)).map_err(|e| fail("roi".into(), e.to_string()))?;
                    Some(Roi { path: p.clone(), mask })
                }
            };
            let ann = PointAnnotation {
                image_id: r.image_id.clone(),
                width: r.width,
                height: r.height,
                points: r.points.iter().map(|p| (p[0], p[1])).collect(),
                roi,
            };
            ann.validate().map_err(|(loc, detail)| fail(loc, detail))?;
            Ok(ann)
        })
        .collect()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<PointAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CodaError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    parse_annotations(&text, &path.display().to_string(), &base)
}

pub fn annotations_to_json(anns: &[PointAnnotation]) -> Result<String> {
    let records: Vec<AnnotationRecord> = anns
        .iter()
        .map(|a| AnnotationRecord {
            image_id: a.image_id.clone(),
            width: a.width,
            height: a.height,
            points: a.points.iter().map(|&(x, y)| [x, y]).collect(),
            roi: a.roi.as_ref().map(|r| r.path.clone()),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

/// Write the annotation file, plus each ROI mask at its path relative to the
/// file's directory.
pub fn save_annotations(anns: &[PointAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    for roi in anns.iter().filter_map(|a| a.roi.as_ref()) {
        roi.mask.save(base.join(&roi.path))?;
    }
    fs::write(path, annotations_to_json(anns)?).map_err(|e| CodaError::io(path, e))
}
