//! Dataset directories: `annotations.json` plus one image per entry under
//! `images/<image_id>.png` (or `.pgm`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::density::{self, PointAnnotation};
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::imageio;
use crate::synth::SyntheticImage;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// An image with its annotation (absent for unlabeled target data).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: DenseGrid,
    pub annotation: Option<PointAnnotation>,
}

impl From<SyntheticImage> for Sample {
    fn from(s: SyntheticImage) -> Self {
        Sample {
            image: s.image,
            annotation: Some(s.annotation),
        }
    }
}

impl Sample {
    /// The same image without its annotation.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            annotation: None,
        }
    }
}

pub fn has_annotations(dir: impl AsRef<Path>) -> bool {
    dir.as_ref().join(ANNOTATION_FILE).is_file()
}

fn image_path(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(IMAGE_DIR).join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Load an annotated dataset directory; every missing image is listed in
/// the error.
pub fn load_annotated(dir: impl AsRef<Path>, channels: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let ann_path = dir.join(ANNOTATION_FILE);
    if !ann_path.is_file() {
        return Err(CodaError::MissingFiles(vec![ann_path]));
    }
    let anns = density::load_annotations(&ann_path)?;
    let missing: Vec<PathBuf> = anns
        .iter()
        .filter(|a| image_path(dir, &a.image_id).is_none())
        .map(|a| dir.join(IMAGE_DIR).join(format!("{}.png", a.image_id)))
        .collect();
    if !missing.is_empty() {
        return Err(CodaError::MissingFiles(missing));
    }
    anns.into_iter()
        .map(|a| {
            let path = image_path(dir, &a.image_id).expect("checked above");
            let image = imageio::load_image(&path, channels)?;
            if (image.height(), image.width()) != (a.height, a.width) {
                return Err(CodaError::Annotation {
                    source_name: ann_path.display().to_string(),
                    location: format!("\"{}\"", a.image_id),
                    detail: format!(
                        "annotation says {}×{} but image is {}×{}",
                        a.height,
                        a.width,
                        image.height(),
                        image.width()
                    ),
                });
            }
            Ok(Sample {
                image,
                annotation: Some(a),
            })
        })
        .collect()
}

/// Load every image under `dir/images`, sorted by file name, ignoring any
/// annotation file.
pub fn load_images(dir: impl AsRef<Path>, channels: usize) -> Result<Vec<Sample>> {
    let img_dir = dir.as_ref().join(IMAGE_DIR);
    let entries = fs::read_dir(&img_dir).map_err(|e| CodaError::io(&img_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodaError::MissingFiles(vec![img_dir.join("*.png")]));
    }
    paths
        .iter()
        .map(|p| {
            Ok(Sample {
                image: imageio::load_image(p, channels)?,
                annotation: None,
            })
        })
        .collect()
}

/// Write images and `annotations.json` for annotated samples.
pub fn write_annotated(dir: impl AsRef<Path>, samples: &[SyntheticImage]) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| CodaError::io(&img_dir, e))?;
    for s in samples {
        imageio::save_gray(&s.image, img_dir.join(format!("{}.png", s.annotation.image_id)))?;
    }
    let anns: Vec<PointAnnotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    density::save_annotations(&anns, dir.join(ANNOTATION_FILE))
}
