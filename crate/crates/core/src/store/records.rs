//! Flat float32 record files.
//!
//! Layout: a 16-byte little-endian header `magic | version | count | dim`
//! followed by `count * dim` little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SFR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Rows of equal width, stored as `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRecords {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

pub fn encode_records(dim: usize, rows: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * dim * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8], what: &str) -> Result<FloatRecords> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::SchemaViolation(format!("{what}: truncated header")));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::SchemaViolation(format!("{what}: bad magic")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (version, count, dim) = (word(4), word(8), word(12));
    if version != VERSION as usize {
        return Err(Error::SchemaViolation(format!(
            "{what}: unsupported version {version}"
        )));
    }
    let expected = HEADER_LEN + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::SchemaViolation(format!(
            "{what}: {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let rows = bytes[HEADER_LEN..]
        .chunks_exact(dim.max(1) * 4)
        .take(count)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok(FloatRecords { dim, rows })
}

pub fn write_records(path: &Path, dim: usize, rows: &[Vec<f32>]) -> Result<()> {
    fs::write(path, encode_records(dim, rows)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<FloatRecords> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, &path.display().to_string())
}

/// Converts rows to unit length in f64.
///
/// Rows already unit to within 1e-6 are kept verbatim so that f32 files
/// written from unit vectors survive a load/save cycle bit-exactly.
pub fn normalize_rows(rows: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(index, row)| {
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::CorruptFeature {
                    index,
                    reason: format!("non-finite entry {bad}"),
                });
            }
            let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::CorruptFeature {
                    index,
                    reason: "zero norm".into(),
                });
            }
            if (norm - 1.0).abs() <= 1e-6 {
                Ok(v)
            } else {
                Ok(v.into_iter().map(|x| x / norm).collect())
            }
        })
        .collect()
}

pub fn to_f32_rows(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect()
}
