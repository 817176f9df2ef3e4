//! "HSCUBE v1" hyperspectral cube files.
//!
//! A single JSON header line
//! `{"magic":"HSCUBE","version":1,"bands":l,"rows":R,"cols":C,"dtype":"f64","order":"band-major"}`
//! terminated by `\n`, followed by `l·R·C` little-endian `f64` values with the
//! band index varying slowest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CUBE_MAGIC: &str = "HSCUBE";
pub const CUBE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CubeHeader {
    magic: String,
    version: u32,
    bands: usize,
    rows: usize,
    cols: usize,
    dtype: String,
    order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
    /// Band-major payload: `data[(b * rows + r) * cols + c]`.
    pub data: Vec<f64>,
}

impl Cube {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Cube whose pixels are the columns of `x`, laid out on a `rows × cols` grid.
    pub fn from_data(x: &DataMatrix, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != x.samples() {
            return Err(Error::dim(format!(
                "{rows}x{cols} grid does not hold {} samples",
                x.samples()
            )));
        }
        Ok(Self {
            bands: x.bands(),
            rows,
            cols,
            data: x.as_matrix().as_slice().to_vec(),
        })
    }

    /// Bands × pixels matrix with each band's mean removed.
    pub fn to_centered_data(&self) -> Result<DataMatrix> {
        let n = self.pixels();
        let mut m = Matrix::from_vec(self.bands, n, self.data.clone())?;
        for b in 0..self.bands {
            let row = &mut m.as_mut_slice()[b * n..(b + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        DataMatrix::new(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CubeHeader {
            magic: CUBE_MAGIC.into(),
            version: CUBE_VERSION,
            bands: self.bands,
            rows: self.rows,
            cols: self.cols,
            dtype: "f64".into(),
            order: "band-major".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("cube header line is not terminated"))?;
        let header: CubeHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(format!("cube header: {e}")))?;
        if header.magic != CUBE_MAGIC {
            return Err(Error::format(format!("unknown cube magic {:?}", header.magic)));
        }
        if header.version != CUBE_VERSION {
            return Err(Error::format(format!("unsupported cube version {}", header.version)));
        }
        if header.dtype != "f64" || header.order != "band-major" {
            return Err(Error::format(format!(
                "unsupported cube layout dtype={} order={}",
                header.dtype, header.order
            )));
        }
        let count = header
            .bands
            .checked_mul(header.rows)
            .and_then(|v| v.checked_mul(header.cols))
            .ok_or_else(|| Error::format("cube dimensions overflow"))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != count * 8 {
            return Err(Error::format(format!(
                "cube payload has {} bytes, header implies {}",
                payload.len(),
                count * 8
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("cube contains non-finite values".into()));
        }
        Ok(Self {
            bands: header.bands,
            rows: header.rows,
            cols: header.cols,
            data,
        })
    }
}

pub fn write_cube(path: impl AsRef<Path>, cube: &Cube) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&cube.to_bytes())?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Cube::from_bytes(&fs::read(path)?)
}

/// Reads a cube and returns its pixels as zero-mean columns.
pub fn load_cube(path: impl AsRef<Path>) -> Result<DataMatrix> {
    read_cube(path)?.to_centered_data()
}
