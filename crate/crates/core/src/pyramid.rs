//! Scale-aware patch pyramids: co-centered crops of one patch, each resized
//! to the network input size, with ground-truth counts when annotated.

use rand::Rng;

use crate::density::{self, PointAnnotation, SigmaMode};
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::kernels;

pub const MIN_CROP: usize = 8;

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Copy the pixels of `rect` out of every item and channel of `image`.
pub fn crop(image: &DenseGrid, rect: Rect) -> Result<DenseGrid> {
    let [n, c, h, w] = image.shape();
    if rect.x1 > w || rect.y1 > h || rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
        return Err(CodaError::invalid(
            "crop",
            format!("{rect:?} outside {h}×{w} image"),
        ));
    }
    let mut data = Vec::with_capacity(n * c * rect.width() * rect.height());
    for plane in image.data().chunks_exact(h * w) {
        for y in rect.y0..rect.y1 {
            data.extend_from_slice(&plane[y * w + rect.x0..y * w + rect.x1]);
        }
    }
    DenseGrid::new([n, c, rect.height(), rect.width()], data)
}

/// Uniformly place a patch covering `fraction` of each image side.
pub fn sample_patch(image: &DenseGrid, rng: &mut impl Rng, fraction: f64) -> Result<(DenseGrid, Rect)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CodaError::invalid(
            "sample_patch",
            format!("patch_fraction must be in (0, 1], got {fraction}"),
        ));
    }
    let rect = sample_rect(image.height(), image.width(), rng, fraction);
    Ok((crop(image, rect)?, rect))
}

pub fn sample_rect(height: usize, width: usize, rng: &mut impl Rng, fraction: f64) -> Rect {
    let pw = ((width as f64 * fraction).round() as usize).clamp(1, width);
    let ph = ((height as f64 * fraction).round() as usize).clamp(1, height);
    let x0 = rng.random_range(0..=width - pw);
    let y0 = rng.random_range(0..=height - ph);
    Rect::new(x0, y0, x0 + pw, y0 + ph)
}

/// One pyramid level.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    /// Crop resized to the network input size.
    pub image: DenseGrid,
    /// Crop rectangle in source-image coordinates.
    pub rect: Rect,
    pub gt_count: Option<f64>,
    /// Annotated points inside the crop, mapped to resized-crop coordinates.
    pub points: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug)]
pub struct PatchPyramid {
    /// Smallest scale first; the last level is the original patch.
    pub levels: Vec<PyramidLevel>,
}

impl PatchPyramid {
    pub fn scales(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.scale).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn gt_counts(&self) -> Option<Vec<f64>> {
        self.levels.iter().map(|l| l.gt_count).collect()
    }

    /// All level images stacked along the batch axis.
    pub fn batch(&self) -> Result<DenseGrid> {
        DenseGrid::stack(&self.levels.iter().map(|l| l.image.clone()).collect::<Vec<_>>())
    }

    /// Ground-truth density per level at `1/stride` of the input size,
    /// stacked along the batch axis. `None` without annotations.
    pub fn gt_density(&self, mode: SigmaMode, stride: usize) -> Result<Option<DenseGrid>> {
        let mut maps = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let Some(points) = &level.points else { return Ok(None) };
            let (h, w) = (level.image.height(), level.image.width());
            let sigmas = mode.sigmas(points)?;
            let full = density::splat_gaussians(points, &sigmas, h, w);
            maps.push(kernels::block_sum_forward(&full, stride)?);
        }
        DenseGrid::stack(&maps).map(Some)
    }
}

/// Sort, validate and complete a scale list: ascending, in `(0, 1]`, ending
/// with 1.0.
pub fn normalize_scales(scales: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = scales.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(CodaError::invalid("build_pyramid", format!("scale {bad} outside (0, 1]")));
    }
    let mut out = scales.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    if out.last() != Some(&1.0) {
        out.push(1.0);
    }
    Ok(out)
}

/// Crop rectangle for `scale` around the center of `patch`: the ideal
/// rectangle's top-left is floored and its bottom-right ceiled.
pub fn scaled_rect(patch: Rect, scale: f64) -> Rect {
    if scale == 1.0 {
        return patch;
    }
    let (cx, cy) = patch.center();
    let half_w = patch.width() as f64 * scale / 2.0;
    let half_h = patch.height() as f64 * scale / 2.0;
    let x0 = ((cx - half_w).floor() as usize).max(patch.x0);
    let y0 = ((cy - half_h).floor() as usize).max(patch.y0);
    let x1 = ((cx + half_w).ceil() as usize).min(patch.x1);
    let y1 = ((cy + half_h).ceil() as usize).min(patch.y1);
    Rect::new(x0, y0, x1, y1)
}

/// Build the pyramid for `patch_rect` of `image` (a `1 × C × H × W` grid).
pub fn build_pyramid(
    image: &DenseGrid,
    patch_rect: Rect,
    scales: &[f64],
    input_size: (usize, usize),
    ann: Option<&PointAnnotation>,
) -> Result<PatchPyramid> {
    let scales = normalize_scales(scales)?;
    let (in_h, in_w) = input_size;
    let mut levels = Vec::with_capacity(scales.len());
    for &scale in &scales {
        let rect = scaled_rect(patch_rect, scale);
        if rect.width() < MIN_CROP || rect.height() < MIN_CROP {
            return Err(CodaError::invalid(
                "build_pyramid",
                format!(
                    "scale {scale} gives a {}×{} crop, below the {MIN_CROP}px minimum",
                    rect.height(),
                    rect.width()
                ),
            ));
        }
        let cropped = crop(image, rect)?;
        let resized = kernels::resize_bilinear_forward(&cropped, in_h, in_w)?;
        let points = ann.map(|a| {
            let sx = in_w as f64 / rect.width() as f64;
            let sy = in_h as f64 / rect.height() as f64;
            a.points
                .iter()
                .filter(|&&(x, y)| rect.contains_point(x, y))
                .map(|&(x, y)| {
                    // keep strictly inside the half-open resized extent
                    let rx = ((x - rect.x0 as f64) * sx).min(in_w as f64 - 1e-9);
                    let ry = ((y - rect.y0 as f64) * sy).min(in_h as f64 - 1e-9);
                    (rx, ry)
                })
                .collect::<Vec<_>>()
        });
        levels.push(PyramidLevel {
            scale,
            image: resized,
            rect,
            gt_count: points.as_ref().map(|p| p.len() as f64),
            points,
        });
    }
    Ok(PatchPyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_scales_on_square_patch() {
        let image = DenseGrid::zeros([1, 1, 100, 100]);
        let p = build_pyramid(&image, Rect::new(0, 0, 100, 100), &[0.8, 0.6, 0.4], (32, 32), None).unwrap();
        let sizes: Vec<usize> = p.levels.iter().map(|l| l.rect.width()).collect();
        assert_eq!(sizes, vec![40, 60, 80, 100]);
        for l in &p.levels {
            assert_eq!(l.rect.center(), (50.0, 50.0));
            assert_eq!(l.image.shape(), [1, 1, 32, 32]);
        }
        assert_eq!(p.scales(), vec![0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn unit_scale_only_is_the_patch() {
        let image = DenseGrid::filled([1, 1, 20, 20], 0.5);
        let rect = Rect::new(2, 3, 18, 19);
        let p = build_pyramid(&image, rect, &[1.0], (16, 16), None).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels[0].rect, rect);
        assert_eq!(p.levels[0].image, crop(&image, rect).unwrap());
    }

    #[test]
    fn too_small_crop_rejected() {
        let image = DenseGrid::zeros([1, 1, 16, 16]);
        assert!(build_pyramid(&image, Rect::new(0, 0, 16, 16), &[0.3], (16, 16), None).is_err());
    }

    #[test]
    fn bad_scales_rejected() {
        assert!(normalize_scales(&[0.0]).is_err());
        assert!(normalize_scales(&[1.5]).is_err());
        assert_eq!(normalize_scales(&[0.6, 0.4, 1.0]).unwrap(), vec![0.4, 0.6, 1.0]);
    }

    #[test]
    fn counts_follow_half_open_rects() {
        let image = DenseGrid::zeros([1, 1, 100, 100]);
        let ann = PointAnnotation::new("a", 100, 100, vec![(30.0, 50.0), (70.0, 50.0), (50.0, 50.0), (5.0, 5.0)]).unwrap();
        let p = build_pyramid(&image, Rect::new(0, 0, 100, 100), &[0.8, 0.6, 0.4], (32, 32), Some(&ann)).unwrap();
        // 0.4 crop is [30, 70): includes x=30, excludes x=70
        assert_eq!(p.gt_counts().unwrap(), vec![2.0, 3.0, 3.0, 4.0]);
        let gt = p.gt_density(SigmaMode::Fixed { sigma: 1.5 }, 4).unwrap().unwrap();
        assert_eq!(gt.shape(), [4, 1, 8, 8]);
        for (i, c) in p.gt_counts().unwrap().iter().enumerate() {
            let s: f64 = gt.item(i).iter().sum();
            assert!((s - c).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_patch_whole_image_and_determinism() {
        let image = DenseGrid::zeros([1, 1, 40, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (patch, rect) = sample_patch(&image, &mut rng, 1.0).unwrap();
        assert_eq!(rect, Rect::new(0, 0, 30, 40));
        assert_eq!(patch.shape(), image.shape());

        let a = sample_rect(100, 100, &mut ChaCha8Rng::seed_from_u64(9), 0.5);
        let b = sample_rect(100, 100, &mut ChaCha8Rng::seed_from_u64(9), 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_rects_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = sample_rect(100, 100, &mut rng, 0.5);
            assert!(r.x1 <= 100 && r.y1 <= 100);
            assert_eq!((r.width(), r.height()), (50, 50));
        }
    }

    #[test]
    fn sample_patch_rejects_bad_fraction() {
        let image = DenseGrid::zeros([1, 1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&image, &mut rng, 0.0).is_err());
        assert!(sample_patch(&image, &mut rng, 1.2).is_err());
    }
}
