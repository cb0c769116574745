use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use super::records::{normalize_rows, read_records, to_f32_rows, write_records};
use super::rle::{rle_decode, rle_encode, RunLengthRegion};
use super::{CameraPose, Frame, LayerTag, Mask, MaskLayer, MaskRef, PropagatedMaskSet, SemanticFeature};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const POSES: &str = "poses.json";
pub const PROPAGATED: &str = "propagated.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    /// Embedding width `d`.
    pub feature_dim: usize,
    /// Per-Gaussian semantic channel width `d_f`.
    pub field_dim: usize,
    pub scales: Vec<LayerTag>,
    pub frames: Vec<FrameEntry>,
    pub poses: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagated: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    frame_id: u32,
    /// 3x3, row-major
    intrinsics: Vec<f64>,
    /// 4x4, row-major
    world_to_camera: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PropagatedFile {
    num_categories: usize,
    frames: Vec<PropagatedRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PropagatedRecord {
    frame_id: u32,
    masks: Vec<RunLengthRegion>,
}

/// Everything a training run consumes. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub field_dim: usize,
    pub frames: Vec<Frame>,
    pub layers: Vec<MaskLayer>,
    pub propagated: Option<Vec<PropagatedMaskSet>>,
}

impl Dataset {
    pub fn layer(&self, tag: LayerTag) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.tag == tag)
    }

    pub fn layer_mut(&mut self, tag: LayerTag) -> Option<&mut MaskLayer> {
        self.layers.iter_mut().find(|l| l.tag == tag)
    }

    pub fn frame(&self, frame_id: u32) -> Option<&Frame> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn propagated_for(&self, frame_id: u32) -> Option<&PropagatedMaskSet> {
        self.propagated
            .as_ref()
            .and_then(|p| p.iter().find(|s| s.frame_id == frame_id))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            field_dim: self.field_dim,
            scales: self.layers.iter().map(|l| l.tag).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameEntry {
                    frame_id: f.frame_id,
                    width: f.width,
                    height: f.height,
                    image_path: f.image_path.clone(),
                })
                .collect(),
            poses: POSES.into(),
            propagated: self.propagated.as_ref().map(|_| PROPAGATED.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => {
            Error::SchemaViolation(format!("{}: {e}", path.display()))
        }
        _ => Error::json(path, e),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&root.join(MANIFEST))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::SchemaViolation(format!(
            "manifest version {} unsupported",
            manifest.version
        )));
    }
    if manifest.feature_dim == 0 {
        return Err(Error::SchemaViolation("feature_dim must be positive".into()));
    }

    let poses: Vec<PoseRecord> = read_json(&root.join(&manifest.poses))?;
    let mut cameras = BTreeMap::new();
    for p in poses {
        if p.intrinsics.len() != 9 || p.world_to_camera.len() != 16 {
            return Err(Error::SchemaViolation(format!(
                "pose for frame {} has wrong matrix sizes",
                p.frame_id
            )));
        }
        let k = Matrix3::from_row_slice(&p.intrinsics);
        let e = Matrix4::from_row_slice(&p.world_to_camera);
        cameras.insert(p.frame_id, CameraPose::new(k, e)?);
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut seen = BTreeSet::new();
    for entry in &manifest.frames {
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::SchemaViolation(format!(
                "frame {} has zero size",
                entry.frame_id
            )));
        }
        if !seen.insert(entry.frame_id) {
            return Err(Error::SchemaViolation(format!(
                "duplicate frame id {}",
                entry.frame_id
            )));
        }
        let camera = cameras.remove(&entry.frame_id).ok_or_else(|| {
            Error::MissingArtifact(format!("pose for frame {}", entry.frame_id))
        })?;
        frames.push(Frame {
            frame_id: entry.frame_id,
            width: entry.width,
            height: entry.height,
            camera,
            image_path: entry.image_path.clone(),
        });
    }
    frames.sort_by_key(|f| f.frame_id);
    let sizes: BTreeMap<u32, (usize, usize)> =
        frames.iter().map(|f| (f.frame_id, (f.width, f.height))).collect();

    let mut layers = Vec::new();
    for &tag in &manifest.scales {
        let masks_path = root.join(format!("masks_{}.json", tag.as_str()));
        let feats_path = root.join(format!("features_{}.bin", tag.as_str()));
        let masks: Vec<Mask> = read_json(&masks_path)?;
        let recs = read_records(&feats_path)?;
        if recs.dim != manifest.feature_dim {
            return Err(Error::SchemaViolation(format!(
                "{}: {} floats per record, manifest declares {}",
                feats_path.display(),
                recs.dim,
                manifest.feature_dim
            )));
        }
        if recs.rows.len() != masks.len() {
            return Err(Error::SchemaViolation(format!(
                "{}: {} records for {} masks",
                feats_path.display(),
                recs.rows.len(),
                masks.len()
            )));
        }
        let vectors = normalize_rows(&recs.rows)?;
        let mut paired: Vec<(Mask, Vec<f64>)> = masks.into_iter().zip(vectors).collect();
        let mut ids = BTreeSet::new();
        for (m, _) in &paired {
            let (w, h) = *sizes.get(&m.frame_id).ok_or_else(|| {
                Error::SchemaViolation(format!("mask {} references unknown frame {}", m.mask_id, m.frame_id))
            })?;
            if m.region.width() != w || m.region.height() != h {
                return Err(Error::SchemaViolation(format!(
                    "mask {} region size {:?} does not match frame {}",
                    m.mask_id, m.region.size, m.frame_id
                )));
            }
            if !ids.insert((m.frame_id, m.mask_id)) {
                return Err(Error::SchemaViolation(format!(
                    "duplicate mask ({}, {})",
                    m.frame_id, m.mask_id
                )));
            }
            rle_decode(&m.region)?;
        }
        paired.sort_by_key(|(m, _)| (m.frame_id, m.mask_id));
        let (masks, features): (Vec<_>, Vec<_>) = paired
            .into_iter()
            .map(|(m, v)| {
                let f = SemanticFeature {
                    mask_ref: MaskRef {
                        frame_id: m.frame_id,
                        mask_id: m.mask_id,
                    },
                    vector: v,
                };
                (m, f)
            })
            .unzip();
        layers.push(MaskLayer { tag, masks, features });
    }

    let propagated = match &manifest.propagated {
        None => None,
        Some(rel) => {
            let file: PropagatedFile = read_json(&root.join(rel))?;
            let mut sets = Vec::with_capacity(file.frames.len());
            for rec in file.frames {
                let (w, h) = *sizes.get(&rec.frame_id).ok_or_else(|| {
                    Error::SchemaViolation(format!("propagated masks for unknown frame {}", rec.frame_id))
                })?;
                if rec.masks.len() != file.num_categories {
                    return Err(Error::SchemaViolation(format!(
                        "frame {} has {} propagated masks, expected {}",
                        rec.frame_id,
                        rec.masks.len(),
                        file.num_categories
                    )));
                }
                let masks = rec
                    .masks
                    .iter()
                    .map(|r| {
                        if r.width() != w || r.height() != h {
                            return Err(Error::SchemaViolation(format!(
                                "propagated mask size mismatch in frame {}",
                                rec.frame_id
                            )));
                        }
                        rle_decode(r)
                    })
                    .collect::<Result<_>>()?;
                sets.push(PropagatedMaskSet {
                    frame_id: rec.frame_id,
                    masks,
                });
            }
            sets.sort_by_key(|s| s.frame_id);
            Some(sets)
        }
    };

    Ok(Dataset {
        name: manifest.name,
        feature_dim: manifest.feature_dim,
        field_dim: manifest.field_dim,
        frames,
        layers,
        propagated,
    })
}

/// RGB8 pixels of every frame, in frame order, read from each frame's
/// `image_path` relative to `root`.
pub fn load_frame_images(dataset: &Dataset, root: &Path) -> Result<Vec<Vec<u8>>> {
    dataset
        .frames
        .iter()
        .map(|f| {
            let rel = f
                .image_path
                .as_deref()
                .ok_or_else(|| Error::MissingArtifact(format!("image path of frame {}", f.frame_id)))?;
            let path = root.join(rel);
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            let img = image::open(&path)?.to_rgb8();
            if (img.width() as usize, img.height() as usize) != (f.width, f.height) {
                return Err(Error::SchemaViolation(format!(
                    "{} is {}x{}, frame {} is {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    f.frame_id,
                    f.width,
                    f.height
                )));
            }
            Ok(img.into_raw())
        })
        .collect()
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join(MANIFEST), &dataset.manifest())?;
    let poses: Vec<PoseRecord> = dataset
        .frames
        .iter()
        .map(|f| PoseRecord {
            frame_id: f.frame_id,
            intrinsics: f.camera.intrinsics.transpose().iter().copied().collect(),
            world_to_camera: f.camera.world_to_camera.transpose().iter().copied().collect(),
        })
        .collect();
    write_json(&root.join(POSES), &poses)?;
    for layer in &dataset.layers {
        let tag = layer.tag.as_str();
        write_json(&root.join(format!("masks_{tag}.json")), &layer.masks)?;
        let rows: Vec<Vec<f64>> = layer.features.iter().map(|f| f.vector.clone()).collect();
        write_records(
            &root.join(format!("features_{tag}.bin")),
            dataset.feature_dim,
            &to_f32_rows(&rows),
        )?;
    }
    if let Some(sets) = &dataset.propagated {
        let file = PropagatedFile {
            num_categories: sets.first().map(|s| s.num_categories()).unwrap_or(0),
            frames: sets
                .iter()
                .map(|s| PropagatedRecord {
                    frame_id: s.frame_id,
                    masks: s.masks.iter().map(rle_encode).collect(),
                })
                .collect(),
        };
        write_json(&root.join(PROPAGATED), &file)?;
    }
    Ok(())
}
