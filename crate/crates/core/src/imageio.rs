//! 8-bit image and mask files (PNG / PGM) to and from grids in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::kernels;

fn image_err(path: &Path, e: impl std::fmt::Display) -> CodaError {
    CodaError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Load an image as a `1 × channels × H × W` grid scaled to `[0, 1]`.
/// `channels` must be 1 (luma) or 3 (RGB).
pub fn load_image(path: impl AsRef<Path>, channels: usize) -> Result<DenseGrid> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    image_to_grid(&img, channels).map_err(|e| image_err(path, e))
}

pub fn image_to_grid(img: &DynamicImage, channels: usize) -> Result<DenseGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut planes = vec![0.0; 3 * h * w];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planes[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            planes
        }
        other => {
            return Err(CodaError::invalid(
                "load_image",
                format!("unsupported channel count {other}"),
            ))
        }
    };
    DenseGrid::new([1, channels, h, w], data)
}

/// Quantize a value in `[0, 1]` to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write channel 0 of a single-item grid as an 8-bit grayscale image; the
/// format follows the extension (`.png` or `.pgm`).
pub fn save_gray(grid: &DenseGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (grid.height(), grid.width());
    let pixels: Vec<u8> = grid.item(0)[..h * w].iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized to image");
    let format = ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
    img.save_with_format(path, format).map_err(|e| image_err(path, e))
}

/// Linear grayscale rendering of a density map: its minimum maps to black
/// and its maximum to white. A constant map renders black.
pub fn render_density(map: &DenseGrid, path: impl AsRef<Path>) -> Result<()> {
    let plane = &map.item(0)[..map.height() * map.width()];
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled = DenseGrid::from_2d(
        map.height(),
        map.width(),
        plane.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect(),
    )?;
    save_gray(&scaled, path)
}

/// Binary region-of-interest mask at image resolution (1 inside, 0 outside).
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    grid: DenseGrid,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, inside: Vec<bool>) -> Result<Self> {
        let data = inside.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Ok(RoiMask {
            grid: DenseGrid::from_2d(height, width, data)?,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        RoiMask {
            grid: DenseGrid::filled([1, 1, height, width], 1.0),
        }
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn grid(&self) -> &DenseGrid {
        &self.grid
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.grid.at(0, 0, y, x) > 0.0
    }

    /// Fraction of each `factor × factor` block that lies inside the mask.
    pub fn downsample(&self, factor: usize) -> Result<DenseGrid> {
        let summed = kernels::block_sum_forward(&self.grid, factor)?;
        let area = (factor * factor) as f64;
        Ok(summed.map(|v| v / area))
    }

    /// Read an 8-bit PGM/PNG mask; any nonzero pixel is inside.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let inside = img.pixels().map(|p| p.0[0] > 0).collect();
        Self::new(h, w, inside)
    }

    /// Write as 8-bit PGM/PNG (0 outside, 255 inside).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let mut img = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = if self.contains(y, x) { 255 } else { 0 };
                img.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        let format = ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
        img.save_with_format(path, format).map_err(|e| image_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_maps_min_black_max_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let map = DenseGrid::from_2d(1, 3, vec![-2.0, 0.0, 2.0]).unwrap();
        render_density(&map, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0u8, 128, 255]);
        let again = dir.path().join("r2.png");
        render_density(&map, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn mask_round_trips_through_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roi.pgm");
        let mask = RoiMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        mask.save(&path).unwrap();
        assert_eq!(RoiMask::load(&path).unwrap(), mask);
    }

    #[test]
    fn mask_downsample_is_block_fraction() {
        let mask = RoiMask::new(2, 2, vec![true, false, true, true]).unwrap();
        assert_eq!(mask.downsample(2).unwrap().data(), &[0.75]);
    }

    #[test]
    fn gray_image_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let g = DenseGrid::from_2d(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        save_gray(&g, &path).unwrap();
        let back = load_image(&path, 1).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0]);
        let rgb = load_image(&path, 3).unwrap();
        assert_eq!(rgb.shape(), [1, 3, 1, 3]);
    }

    #[test]
    fn unreadable_image_is_reported() {
        let err = load_image("/nonexistent/x.png", 1).unwrap_err();
        assert!(matches!(err, CodaError::Image { .. }));
    }
}
