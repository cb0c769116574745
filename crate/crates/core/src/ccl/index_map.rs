use std::fs;
use std::path::Path;

use super::nearest_prototype;
use crate::error::{Error, Result};
use crate::store::{Codebook, Mask, Scale, SemanticFeature};

/// Grid value of pixels covered by no mask.
pub const UNASSIGNED: u32 = u32::MAX;

const MAGIC: [u8; 4] = *b"SIM1";

/// Per-pixel prototype indices for one frame and scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub frame_id: u32,
    pub scale: Scale,
    pub width: usize,
    pub height: usize,
    pub grid: Vec<u32>,
}

impl IndexMap {
    pub fn unassigned(frame_id: u32, scale: Scale, width: usize, height: usize) -> Self {
        Self {
            frame_id,
            scale,
            width,
            height,
            grid: vec![UNASSIGNED; width * height],
        }
    }

    pub fn assigned_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v != UNASSIGNED).count()
    }
}

/// Every pixel of mask `i` gets the nearest prototype of feature `i`;
/// uncovered pixels stay [`UNASSIGNED`].
pub fn build_index_map(
    frame_id: u32,
    scale: Scale,
    width: usize,
    height: usize,
    masks: &[(&Mask, &SemanticFeature)],
    codebook: &Codebook,
) -> Result<IndexMap> {
    let mut map = IndexMap::unassigned(frame_id, scale, width, height);
    for (mask, feature) in masks {
        let region = mask.bitmap()?;
        if region.width() != width || region.height() != height {
            return Err(Error::ShapeError(format!(
                "mask {} is {}x{}, frame is {width}x{height}",
                mask.mask_id,
                region.width(),
                region.height()
            )));
        }
        let (j, _) = nearest_prototype(&feature.vector, codebook)?;
        for i in region.ones() {
            map.grid[i] = j as u32;
        }
    }
    Ok(map)
}

/// Layout: `SIM1`, count, then per map `frame_id, scale(0=sp,1=wp), width,
/// height` followed by `width*height` u32 values, all little-endian.
pub fn write_index_maps(path: &Path, maps: &[IndexMap]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(maps.len() as u32).to_le_bytes());
    for m in maps {
        let scale = match m.scale {
            Scale::Sp => 0u32,
            Scale::Wp => 1,
        };
        for v in [m.frame_id, scale, m.width as u32, m.height as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &m.grid {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_index_maps(path: &Path) -> Result<Vec<IndexMap>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::SchemaViolation(format!("{}: malformed index map file", path.display()));
    if bytes.len() < 8 || bytes[0..4] != MAGIC {
        return Err(bad());
    }
    let mut words = bytes[4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()));
    let count = words.next().ok_or_else(bad)?;
    let mut maps = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut next = || words.next().ok_or_else(bad);
        let frame_id = next()?;
        let scale = match next()? {
            0 => Scale::Sp,
            1 => Scale::Wp,
            _ => return Err(bad()),
        };
        let (width, height) = (next()? as usize, next()? as usize);
        let grid = (0..width * height).map(|_| next()).collect::<Result<Vec<_>>>()?;
        maps.push(IndexMap {
            frame_id,
            scale,
            width,
            height,
            grid,
        });
    }
    if words.next().is_some() {
        return Err(bad());
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmap::Bitmap;
    use crate::store::MaskRef;

    fn feature(v: Vec<f64>) -> SemanticFeature {
        SemanticFeature {
            mask_ref: MaskRef { frame_id: 0, mask_id: 0 },
            vector: v,
        }
    }

    #[test]
    fn full_frame_mask_gives_constant_grid() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let m = Mask::new(0, 0, &Bitmap::full(5, 4), 1.0, 1.0);
        let f = feature(vec![0.5, 0.9]);
        let map = build_index_map(0, Scale::Wp, 5, 4, &[(&m, &f)], &cb).unwrap();
        assert!(map.grid.iter().all(|&v| v == 2));
    }

    #[test]
    fn no_masks_all_unassigned() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let map = build_index_map(3, Scale::Sp, 4, 4, &[], &cb).unwrap();
        assert_eq!(map.assigned_count(), 0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = IndexMap::unassigned(2, Scale::Sp, 3, 2);
        a.grid[4] = 7;
        let b = IndexMap::unassigned(5, Scale::Wp, 1, 1);
        let p = dir.path().join("idx.bin");
        write_index_maps(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_index_maps(&p).unwrap(), vec![a, b]);
    }
}
