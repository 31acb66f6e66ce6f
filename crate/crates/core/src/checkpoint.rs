//! The CKPT container: named arrays of 32-bit floats.
//!
//! Layout (all integers u32 little-endian): magic `CKPT`, version, then until
//! end of file, per array: name length, UTF-8 name, rank, dims, values as
//! IEEE-754 f32.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;

pub const CKPT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedArray {
    pub fn from_grid(grid: &DenseGrid, dims: Vec<usize>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), grid.len());
        NamedArray {
            dims,
            values: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        NamedArray {
            dims: vec![1],
            values: vec![v as f32],
        }
    }

    /// Widen to a rank-4 grid, padding missing trailing dimensions with 1.
    pub fn to_grid(&self) -> Result<DenseGrid> {
        if self.dims.len() > 4 {
            return Err(CodaError::Format {
                format: "CKPT",
                detail: format!("rank {} arrays are not supported", self.dims.len()),
            });
        }
        let mut shape = [1usize; 4];
        shape[..self.dims.len()].copy_from_slice(&self.dims);
        DenseGrid::new(shape, self.values.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: IndexMap<String, NamedArray>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.get(name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.arrays.get(name).and_then(|a| a.values.first()).map(|&v| v as f64)
    }

    /// Arrays whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a NamedArray)> + 'a {
        self.arrays
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.dims.len() as u32).to_le_bytes());
            for &d in &arr.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &arr.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("missing CKPT magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let mut ckpt = Checkpoint::default();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("array name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let values = r
                .take(4 * count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if ckpt.arrays.contains_key(&name) {
                return Err(r.err(&format!("duplicate array `{name}`")));
            }
            ckpt.arrays.insert(name, NamedArray { dims, values });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| CodaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CodaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: &str) -> CodaError {
        CodaError::Format {
            format: "CKPT",
            detail: format!("{detail} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
