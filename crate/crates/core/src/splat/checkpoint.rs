//! Scene checkpoints: a JSON header next to a float-record file with one
//! row per Gaussian laid out as `p(3) | r(4) | s(3) | alpha_logit | c(3) | f(d_f)`.

use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{Gaussian, COLOR_DIM};
use crate::error::{Error, Result};
use crate::store::{read_records, write_records};

const GEOMETRY_WIDTH: usize = 3 + 4 + 3 + 1;
pub const SCENE_FORMAT: &str = "semfield-scene";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub color_dim: usize,
    pub feature_dim: usize,
    /// Record file name, relative to the header.
    pub records: String,
}

fn to_row(g: &Gaussian) -> Vec<f32> {
    let mut row = Vec::with_capacity(GEOMETRY_WIDTH + COLOR_DIM + g.feature.len());
    row.extend(g.position.iter().chain(g.rotation.iter()).chain(g.scale.iter()).map(|&v| v as f32));
    row.push(g.alpha_logit as f32);
    row.extend(g.color.iter().chain(&g.feature).map(|&v| v as f32));
    row
}

fn from_row(row: &[f32]) -> Gaussian {
    let v = |i: usize| row[i] as f64;
    // Rotation is kept as stored: an f32-rounded unit quaternion is unit to
    // ~1e-7, and re-normalizing would make quantization non-idempotent.
    Gaussian {
        position: Vector3::new(v(0), v(1), v(2)),
        rotation: Vector4::new(v(3), v(4), v(5), v(6)),
        scale: Vector3::new(v(7), v(8), v(9)),
        alpha_logit: v(10),
        color: [v(11), v(12), v(13)],
        feature: row[GEOMETRY_WIDTH + COLOR_DIM..].iter().map(|&x| x as f64).collect(),
    }
}

/// Rounds every parameter through the on-disk precision, so an in-memory
/// scene behaves exactly like its saved-and-reloaded copy.
pub fn quantize_scene(scene: &mut [Gaussian]) {
    for g in scene {
        *g = from_row(&to_row(g));
    }
}

pub fn save_scene(scene: &[Gaussian], header_path: &Path) -> Result<()> {
    let feature_dim = scene.first().map_or(0, |g| g.feature.len());
    if scene.iter().any(|g| g.feature.len() != feature_dim) {
        return Err(Error::ShapeError("Gaussian feature widths differ".into()));
    }
    let bin = header_path.with_extension("bin");
    let rows: Vec<Vec<f32>> = scene.iter().map(to_row).collect();
    write_records(&bin, GEOMETRY_WIDTH + COLOR_DIM + feature_dim, &rows)?;
    let header = SceneHeader {
        format: SCENE_FORMAT.into(),
        version: 1,
        count: scene.len(),
        color_dim: COLOR_DIM,
        feature_dim,
        records: bin.file_name().unwrap().to_string_lossy().into_owned(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(header_path, e))?;
    fs::write(header_path, text + "\n").map_err(|e| Error::io(header_path, e))
}

pub fn load_scene(header_path: &Path) -> Result<Vec<Gaussian>> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: SceneHeader = serde_json::from_str(&text)
        .map_err(|e| Error::SchemaViolation(format!("{}: {e}", header_path.display())))?;
    if header.format != SCENE_FORMAT || header.version != 1 || header.color_dim != COLOR_DIM {
        return Err(Error::SchemaViolation(format!(
            "{}: unsupported scene header ({} v{}, d_c={})",
            header_path.display(),
            header.format,
            header.version,
            header.color_dim
        )));
    }
    let bin = header_path.parent().unwrap_or(Path::new(".")).join(&header.records);
    let recs = read_records(&bin)?;
    if recs.rows.len() != header.count || recs.dim != GEOMETRY_WIDTH + COLOR_DIM + header.feature_dim {
        return Err(Error::SchemaViolation(format!(
            "{}: {} records of width {}, header implies {} of width {}",
            bin.display(),
            recs.rows.len(),
            recs.dim,
            header.count,
            GEOMETRY_WIDTH + COLOR_DIM + header.feature_dim
        )));
    }
    let scene: Vec<Gaussian> = recs.rows.iter().map(|r| from_row(r)).collect();
    if let Some(i) = scene.iter().position(|g| !g.is_valid()) {
        return Err(Error::CorruptFeature { index: i, reason: "invalid Gaussian parameters".into() });
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_scene_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let mut scene = vec![
            Gaussian::isotropic(Vector3::new(0.1, 0.2, 0.3), 0.05, 0.7, [0.2, 0.4, 0.6], vec![0.1; 8]),
            Gaussian {
                rotation: Vector4::new(0.5, 0.5, 0.5, 0.5),
                ..Gaussian::isotropic(Vector3::new(-1.0, 0.0, 2.0), 0.3, 0.2, [1.0, 0.0, 0.0], vec![-0.3; 8])
            },
        ];
        quantize_scene(&mut scene);
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);
    }

    #[test]
    fn count_mismatch_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let scene = vec![Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.0; 3], vec![])];
        save_scene(&scene, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"count\": 1", "\"count\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_scene(&path), Err(Error::SchemaViolation(_))));
    }
}
