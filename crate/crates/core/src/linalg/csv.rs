//! Plain-text matrix format: one row per line, comma separated, no header.
//! Values are written with 17 significant digits so they read back exactly.

use std::fs;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24);
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("line {}: cannot parse {tok:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format("empty matrix file"));
    }
    Matrix::from_rows(&rows).map_err(|_| Error::format("rows have different lengths"))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse_matrix(&fs::read_to_string(path)?)
}
