//! Counting metrics: MAE, MSE (root of the mean squared error) and the
//! grid-based GMAE(L).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;

/// Ground-truth and predicted count for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountPair {
    pub truth: f64,
    pub predicted: f64,
}

impl From<(f64, f64)> for CountPair {
    fn from((truth, predicted): (f64, f64)) -> Self {
        CountPair { truth, predicted }
    }
}

pub fn mae(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CodaError::invalid("mae", "no images"));
    }
    Ok(pairs.iter().map(|p| (p.truth - p.predicted).abs()).sum::<f64>() / pairs.len() as f64)
}

/// `sqrt(mean((c − ĉ)²))`.
pub fn mse(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CodaError::invalid("mse", "no images"));
    }
    let mean_sq = pairs.iter().map(|p| (p.truth - p.predicted).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Cell boundaries `⌊k·len/cells⌋` for `k = 0..=cells`.
pub fn cell_bounds(len: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|k| k * len / cells).collect()
}

/// Sum of `map` (optionally times `mask`) over rows `ys` and columns `xs`.
pub fn region_sum(map: &DenseGrid, mask: Option<&DenseGrid>, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
    let w = map.width();
    let data = map.item(0);
    let mut total = 0.0;
    for y in ys {
        let row = &data[y * w..(y + 1) * w];
        match mask {
            None => total += row[xs.clone()].iter().sum::<f64>(),
            Some(m) => {
                let mrow = &m.item(0)[y * w..(y + 1) * w];
                total += row[xs.clone()].iter().zip(&mrow[xs.clone()]).map(|(v, m)| v * m).sum::<f64>();
            }
        }
    }
    total
}

/// Whole-map count with the same summation order as [`gmae`] at level 0.
pub fn map_count(map: &DenseGrid, mask: Option<&DenseGrid>) -> f64 {
    region_sum(map, mask, 0..map.height(), 0..map.width())
}

fn check_maps(pred: &DenseGrid, gt: &DenseGrid, mask: Option<&DenseGrid>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.batch() != 1 || pred.channels() != 1 {
        return Err(CodaError::shape(
            "gmae",
            format!("expected equal 1×1×H×W maps, got {:?} and {:?}", pred.shape(), gt.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return Err(CodaError::shape("gmae", format!("mask {:?} vs map {:?}", m.shape(), pred.shape())));
        }
    }
    Ok(())
}

/// Per-image GMAE(L): the map is split into `2^L × 2^L` cells and the
/// absolute count errors of all cells are summed.
pub fn gmae(pred: &DenseGrid, gt: &DenseGrid, level: u32, mask: Option<&DenseGrid>) -> Result<f64> {
    check_maps(pred, gt, mask)?;
    let cells = 1usize.checked_shl(level).filter(|&c| c <= pred.height() && c <= pred.width()).ok_or_else(|| {
        CodaError::invalid(
            "gmae",
            format!("{}×{} map cannot hold 2^{level} cells per side", pred.height(), pred.width()),
        )
    })?;
    let ys = cell_bounds(pred.height(), cells);
    let xs = cell_bounds(pred.width(), cells);
    let mut err = 0.0;
    for yw in ys.windows(2) {
        for xw in xs.windows(2) {
            let p = region_sum(pred, mask, yw[0]..yw[1], xw[0]..xw[1]);
            let g = region_sum(gt, mask, yw[0]..yw[1], xw[0]..xw[1]);
            err += (p - g).abs();
        }
    }
    Ok(err)
}

/// Dataset-level evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub dataset: String,
    pub n_images: usize,
    pub mae: f64,
    pub mse: f64,
    pub gmae: BTreeMap<u32, f64>,
}

impl EvalReport {
    /// Aggregate per-image prediction/ground-truth maps.
    pub fn from_maps(
        dataset: &str,
        maps: &[(DenseGrid, DenseGrid, Option<DenseGrid>)],
        levels: &[u32],
    ) -> Result<Self> {
        if maps.is_empty() {
            return Err(CodaError::invalid("evaluate", "no images"));
        }
        let mut pairs = Vec::with_capacity(maps.len());
        let mut gmae_sums: BTreeMap<u32, f64> = levels.iter().map(|&l| (l, 0.0)).collect();
        for (pred, gt, mask) in maps {
            check_maps(pred, gt, mask.as_ref())?;
            pairs.push(CountPair {
                truth: map_count(gt, mask.as_ref()),
                predicted: map_count(pred, mask.as_ref()),
            });
            for (&level, total) in gmae_sums.iter_mut() {
                *total += gmae(pred, gt, level, mask.as_ref())?;
            }
        }
        let n = maps.len() as f64;
        Ok(EvalReport {
            dataset: dataset.to_string(),
            n_images: maps.len(),
            mae: mae(&pairs)?,
            mse: mse(&pairs)?,
            gmae: gmae_sums.into_iter().map(|(l, s)| (l, s / n)).collect(),
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!("dataset {} ({} images)\n", self.dataset, self.n_images);
        out.push_str(&format!("  MAE      {:>10.4}\n  MSE      {:>10.4}\n", self.mae, self.mse));
        for (l, v) in &self.gmae {
            out.push_str(&format!("  GMAE({l})  {v:>10.4}\n"));
        }
        out
    }
}
