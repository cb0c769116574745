//! Data model and on-disk layout for frames, masks, embeddings, poses and
//! codebooks.
//!
//! A dataset directory holds:
//!
//! - `manifest.json`: frame list, embedding width, field width, layer tags
//! - `poses.json`: per-frame intrinsics and world-to-camera transforms
//! - `masks_<tag>.json` / `features_<tag>.bin` for every layer tag
//! - `propagated.json` (optional): per-frame tracked category masks

mod dataset;
pub mod records;
pub mod rle;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};

pub use dataset::{load_dataset, load_frame_images, save_dataset, Dataset, FrameEntry, Manifest};
pub use records::{normalize_rows, read_records, to_f32_rows, write_records, FloatRecords};
pub use rle::{rle_decode, rle_encode, RunLengthRegion};

/// Label of a mask that matched no tracked category.
pub const UNMATCHED: i32 = -1;

/// The two aggregated mask levels: subpart ∪ part and whole ∪ part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Sp,
    Wp,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Sp, Scale::Wp];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Sp => "sp",
            Scale::Wp => "wp",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(Scale::Sp),
            "wp" => Ok(Scale::Wp),
            other => Err(Error::SchemaViolation(format!("unknown scale `{other}`"))),
        }
    }
}

/// Granularity of a raw segmenter proposal before merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceScale {
    Subpart,
    Part,
    Whole,
}

/// File-name tag of a mask layer: either an aggregated scale or a raw
/// proposal level written by an external exporter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Sp,
    Wp,
    Subpart,
    Part,
    Whole,
}

impl LayerTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Sp => "sp",
            LayerTag::Wp => "wp",
            LayerTag::Subpart => "subpart",
            LayerTag::Part => "part",
            LayerTag::Whole => "whole",
        }
    }

    pub fn scale(self) -> Option<Scale> {
        match self {
            LayerTag::Sp => Some(Scale::Sp),
            LayerTag::Wp => Some(Scale::Wp),
            _ => None,
        }
    }

    pub fn source(self) -> Option<SourceScale> {
        match self {
            LayerTag::Subpart => Some(SourceScale::Subpart),
            LayerTag::Part => Some(SourceScale::Part),
            LayerTag::Whole => Some(SourceScale::Whole),
            _ => None,
        }
    }
}

impl From<Scale> for LayerTag {
    fn from(s: Scale) -> Self {
        match s {
            Scale::Sp => LayerTag::Sp,
            Scale::Wp => LayerTag::Wp,
        }
    }
}

impl From<SourceScale> for LayerTag {
    fn from(s: SourceScale) -> Self {
        match s {
            SourceScale::Subpart => LayerTag::Subpart,
            SourceScale::Part => LayerTag::Part,
            SourceScale::Whole => LayerTag::Whole,
        }
    }
}

/// Pinhole camera: intrinsics plus a rigid world-to-camera transform.
///
/// Camera space follows the usual computer-vision convention: +x right,
/// +y down, +z forward. Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Matrix3<f64>,
    pub world_to_camera: Matrix4<f64>,
}

impl CameraPose {
    pub fn new(intrinsics: Matrix3<f64>, world_to_camera: Matrix4<f64>) -> Result<Self> {
        let pose = Self {
            intrinsics,
            world_to_camera,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_fov(width: usize, height: usize, fov_y: f64, world_to_camera: Matrix4<f64>) -> Result<Self> {
        let fy = height as f64 / (2.0 * (fov_y / 2.0).tan());
        let k = Matrix3::new(fy, 0.0, width as f64 / 2.0, 0.0, fy, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(k, world_to_camera)
    }

    /// Camera at `eye` looking at `target`, with world `up` mapping to -y.
    pub fn look_at(
        width: usize,
        height: usize,
        fov_y: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -rot * eye;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::from_fov(width, height, fov_y, m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let finite = k.iter().chain(self.world_to_camera.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::SchemaViolation("non-finite camera entry".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::SchemaViolation("intrinsics must be upper triangular with K[2,2] = 1".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::SchemaViolation("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::SchemaViolation(format!("rotation block not orthonormal (err {err:e})")));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::SchemaViolation("extrinsics last row must be [0 0 0 1]".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    pub camera: CameraPose,
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub mask_id: u32,
    pub frame_id: u32,
    #[serde(rename = "rle")]
    pub region: RunLengthRegion,
    pub pred_iou: f64,
    pub stability: f64,
    pub label: i32,
}

impl Mask {
    pub fn new(mask_id: u32, frame_id: u32, bitmap: &Bitmap, pred_iou: f64, stability: f64) -> Self {
        Self {
            mask_id,
            frame_id,
            region: rle_encode(bitmap),
            pred_iou,
            stability,
            label: UNMATCHED,
        }
    }

    pub fn bitmap(&self) -> Result<Bitmap> {
        rle_decode(&self.region)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskRef {
    pub frame_id: u32,
    pub mask_id: u32,
}

/// Unit-length embedding of one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeature {
    pub mask_ref: MaskRef,
    pub vector: Vec<f64>,
}

/// One mask layer: records and their embeddings in matching order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    pub tag: LayerTag,
    pub masks: Vec<Mask>,
    pub features: Vec<SemanticFeature>,
}

impl MaskLayer {
    pub fn frame_masks(&self, frame_id: u32) -> impl Iterator<Item = (&Mask, &SemanticFeature)> {
        self.masks
            .iter()
            .zip(&self.features)
            .filter(move |(m, _)| m.frame_id == frame_id)
    }
}

/// Category masks of one frame as produced by a video tracker, one entry per
/// tracked category `1..=K` (entry `k - 1` holds category `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedMaskSet {
    pub frame_id: u32,
    pub masks: Vec<Bitmap>,
}

impl PropagatedMaskSet {
    pub fn num_categories(&self) -> usize {
        self.masks.len()
    }
}

/// Prototype table: `n_prototypes` unit rows of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub prototypes: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(prototypes: Vec<Vec<f64>>) -> Result<Self> {
        let dim = prototypes.first().map(|r| r.len()).unwrap_or(0);
        if prototypes.len() < 2 {
            return Err(Error::InvalidConfig("codebook needs at least 2 prototypes".into()));
        }
        if dim == 0 || prototypes.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeError("ragged or empty prototype rows".into()));
        }
        Ok(Self { dim, prototypes })
    }

    pub fn n_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.prototypes[j]
    }

    pub fn normalize_rows(&mut self) {
        for row in &mut self.prototypes {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_records(path, self.dim, &records::to_f32_rows(&self.prototypes))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let recs = read_records(path)?;
        Self::new(records::normalize_rows(&recs.rows)?)
    }
}

/// Query phrases with their precomputed text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub phrases: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct QuerySetFile {
    phrases: Vec<String>,
    embeddings: String,
}

impl QuerySet {
    pub fn new(phrases: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if phrases.len() != embeddings.len() {
            return Err(Error::SchemaViolation(format!(
                "{} phrases but {} embeddings",
                phrases.len(),
                embeddings.len()
            )));
        }
        let embeddings = embeddings
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !n.is_finite() || n == 0.0 {
                    return Err(Error::CorruptFeature {
                        index,
                        reason: "query embedding has zero or non-finite norm".into(),
                    });
                }
                Ok(if (n - 1.0).abs() <= 1e-6 { v } else { v.into_iter().map(|x| x / n).collect() })
            })
            .collect::<Result<_>>()?;
        Ok(Self { phrases, embeddings })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn position(&self, phrase: &str) -> Option<usize> {
        self.phrases.iter().position(|p| p == phrase)
    }

    /// Writes `<stem>.json` (phrases) next to `<stem>.bin` (embeddings).
    pub fn save(&self, json_path: &std::path::Path) -> Result<()> {
        let bin = json_path.with_extension("bin");
        let dim = self.embeddings.first().map(|r| r.len()).unwrap_or(0);
        write_records(&bin, dim, &records::to_f32_rows(&self.embeddings))?;
        let file = QuerySetFile {
            phrases: self.phrases.clone(),
            embeddings: bin.file_name().unwrap().to_string_lossy().into_owned(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(json_path, e))?;
        std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let file: QuerySetFile = serde_json::from_str(&text).map_err(|e| Error::json(json_path, e))?;
        let bin = json_path.parent().unwrap_or(std::path::Path::new(".")).join(&file.embeddings);
        let recs = read_records(&bin)?;
        Self::new(file.phrases, records::normalize_rows(&recs.rows)?)
    }
}
