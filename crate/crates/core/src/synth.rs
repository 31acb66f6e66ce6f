//! Seeded synthetic scenes: shaded blobs on a background, annotated with
//! their exact centers. Two presets differ in object density and size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::density::PointAnnotation;
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::imageio::to_u8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CountDist {
    Poisson { lambda: f64 },
    /// Inclusive integer range.
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    Flat { level: f64 },
    /// Left-to-right linear ramp.
    Gradient { from: f64, to: f64 },
    /// Flat level plus i.i.d. uniform noise in `[-amplitude, amplitude]`.
    Noise { level: f64, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub count: CountDist,
    pub blob_radius: (f64, f64),
    pub blob_intensity: (f64, f64),
    pub background: Background,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(CodaError::config("blob_radius", format!("need 0 < min ≤ max, got ({r0}, {r1})")));
        }
        let (i0, i1) = self.blob_intensity;
        if !(0.0..=1.0).contains(&i0) || !(0.0..=1.0).contains(&i1) || i0 > i1 {
            return Err(CodaError::config("blob_intensity", "need 0 ≤ min ≤ max ≤ 1"));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(CodaError::config("image_size", "must be ≥ 1"));
        }
        if 2.0 * r1 > h.min(w) as f64 {
            return Err(CodaError::config(
                "blob_radius",
                format!("blobs of radius {r1} do not fit a {h}×{w} image"),
            ));
        }
        match self.count {
            CountDist::Poisson { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(CodaError::config("count.lambda", "must be finite and ≥ 0"))
            }
            CountDist::Uniform { min, max } if min > max => Err(CodaError::config("count", "min > max")),
            _ => Ok(()),
        }
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    /// `1 × 1 × H × W`, quantized to 8-bit levels.
    pub image: DenseGrid,
    pub annotation: PointAnnotation,
    pub radii: Vec<f64>,
}

fn render_one(spec: &DomainSpec, index: usize) -> Result<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = spec.image_size;

    let count = match spec.count {
        CountDist::Poisson { lambda } if lambda > 0.0 => {
            Poisson::new(lambda).expect("validated lambda").sample(&mut rng) as usize
        }
        CountDist::Poisson { .. } => 0,
        CountDist::Uniform { min, max } => rng.random_range(min..=max),
    };

    let mut canvas = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            canvas[y * w + x] = match spec.background {
                Background::Flat { level } => level,
                Background::Gradient { from, to } => from + (to - from) * x as f64 / (w.max(2) - 1) as f64,
                Background::Noise { level, amplitude } => level + amplitude * rng.random_range(-1.0..=1.0),
            };
        }
    }

    let mut points = Vec::with_capacity(count);
    let mut radii = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random_range(0.0..w as f64);
        let y = rng.random_range(0.0..h as f64);
        let r = rng.random_range(spec.blob_radius.0..=spec.blob_radius.1);
        let intensity = rng.random_range(spec.blob_intensity.0..=spec.blob_intensity.1);
        let (y0, y1) = ((y - r).floor().max(0.0) as usize, ((y + r).ceil() as usize).min(h - 1));
        let (x0, x1) = ((x - r).floor().max(0.0) as usize, ((x + r).ceil() as usize).min(w - 1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d2 = (px as f64 + 0.5 - x).powi(2) + (py as f64 + 0.5 - y).powi(2);
                let t = d2 / (r * r);
                if t < 1.0 {
                    canvas[py * w + px] += intensity * (1.0 - t);
                }
            }
        }
        points.push((x, y));
        radii.push(r);
    }

    let image = DenseGrid::from_2d(h, w, canvas.into_iter().map(|v| to_u8(v) as f64 / 255.0).collect())?;
    let annotation = PointAnnotation::new(format!("{}_{index:05}", spec.name), w, h, points)?;
    Ok(SyntheticImage {
        image,
        annotation,
        radii,
    })
}

/// Render `n` scenes; scene `i` depends only on `(spec, i)`.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(CodaError::invalid("generate_domain", "n must be ≥ 1"));
    }
    (0..n).map(|i| render_one(spec, i)).collect()
}

/// Source "dense-small" and target "sparse-large" domains at 256×256.
pub fn preset_shift_pair() -> (DomainSpec, DomainSpec) {
    let source = DomainSpec {
        name: "dense-small".into(),
        count: CountDist::Poisson { lambda: 40.0 },
        blob_radius: (2.0, 3.0),
        blob_intensity: (0.5, 0.8),
        background: Background::Noise {
            level: 0.2,
            amplitude: 0.05,
        },
        image_size: (256, 256),
        seed: 1,
    };
    let target = DomainSpec {
        name: "sparse-large".into(),
        count: CountDist::Poisson { lambda: 10.0 },
        blob_radius: (5.0, 8.0),
        blob_intensity: (0.4, 0.7),
        background: Background::Gradient { from: 0.1, to: 0.35 },
        image_size: (256, 256),
        seed: 2,
    };
    (source, target)
}
