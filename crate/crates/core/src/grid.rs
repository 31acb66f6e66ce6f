//! Dense rank-4 arrays (batch × channels × height × width) and the DMAP
//! density-map file format.

use std::fs;
use std::path::Path;

use crate::error::{CodaError, Result};

/// Row-major rank-4 array with value semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl DenseGrid {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CodaError::shape("DenseGrid::new", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CodaError::shape(
                "DenseGrid::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(DenseGrid { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        assert!(!shape.contains(&0), "zero-sized dimension in {shape:?}");
        DenseGrid {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseGrid {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// A single-item, single-channel grid from row-major `h × w` values.
    pub fn from_2d(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([1, 1, height, width], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// The values of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Batch item `n` as its own grid.
    pub fn item_grid(&self, n: usize) -> DenseGrid {
        DenseGrid {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.shape;
        ((n * ch + c) * h + y) * w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseGrid {
        DenseGrid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenate grids along the batch axis.
    pub fn stack(items: &[DenseGrid]) -> Result<DenseGrid> {
        let first = items
            .first()
            .ok_or_else(|| CodaError::invalid("DenseGrid::stack", "no items"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|g| g.len()).sum());
        let mut batch = 0;
        for g in items {
            if g.shape[1..] != [c, h, w] {
                return Err(CodaError::shape(
                    "DenseGrid::stack",
                    format!("item shape {:?} differs from {:?}", g.shape, first.shape),
                ));
            }
            batch += g.shape[0];
            data.extend_from_slice(&g.data);
        }
        Ok(DenseGrid {
            shape: [batch, c, h, w],
            data,
        })
    }

    /// Encode a single-channel, single-item grid in the DMAP format.
    pub fn to_dmap_bytes(&self) -> Result<Vec<u8>> {
        if self.shape[0] != 1 || self.shape[1] != 1 {
            return Err(CodaError::shape(
                "DMAP encode",
                format!("expected a 1×1×H×W grid, got {:?}", self.shape),
            ));
        }
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(DMAP_MAGIC);
        out.extend_from_slice(&(self.shape[2] as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape[3] as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_dmap_bytes(bytes: &[u8]) -> Result<DenseGrid> {
        let bad = |detail: String| CodaError::Format {
            format: "DMAP",
            detail,
        };
        if bytes.len() < 12 || &bytes[..4] != DMAP_MAGIC {
            return Err(bad("missing DMAP header".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if h == 0 || w == 0 {
            return Err(bad(format!("empty map {h}×{w}")));
        }
        let body = &bytes[12..];
        if body.len() != 4 * h * w {
            return Err(bad(format!(
                "{h}×{w} map needs {} payload bytes, found {}",
                4 * h * w,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        DenseGrid::from_2d(h, w, data)
    }

    pub fn save_dmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_dmap_bytes()?).map_err(|e| CodaError::io(path, e))
    }

    pub fn load_dmap(path: impl AsRef<Path>) -> Result<DenseGrid> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CodaError::io(path, e))?;
        Self::from_dmap_bytes(&bytes)
    }
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(DenseGrid::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(DenseGrid::new([1, 0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn dmap_layout_is_little_endian_row_major() {
        let g = DenseGrid::from_2d(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = g.to_dmap_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DMAP");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.5f32).to_le_bytes());
        assert_eq!(DenseGrid::from_dmap_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn dmap_rejects_truncated_payload() {
        let g = DenseGrid::from_2d(2, 2, vec![0.0; 4]).unwrap();
        let bytes = g.to_dmap_bytes().unwrap();
        assert!(DenseGrid::from_dmap_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(DenseGrid::from_dmap_bytes(b"DMAQ\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn dmap_rejects_multichannel() {
        assert!(DenseGrid::zeros([1, 2, 2, 2]).to_dmap_bytes().is_err());
    }
}
