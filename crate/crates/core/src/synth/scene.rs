//! Procedural tabletop scenes: K objects on a table seen from a camera ring,
//! with masks, corrupted embeddings and hidden ground truth.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corruption::{category_vectors, corrupt_feature, derive_seed, random_unit, truncate_half_plane, CorruptionSpec};
use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::splat::{logit, quantize_scene, render, save_scene, Gaussian};
use crate::store::{
    normalize_rows, rle_decode, rle_encode, save_dataset, to_f32_rows, CameraPose, Dataset, Frame, LayerTag, Mask,
    MaskLayer, MaskRef, PropagatedMaskSet, QuerySet, RunLengthRegion, SemanticFeature,
};

pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const QUERIES: &str = "queries.json";
pub const SCENE: &str = "scene.json";
pub const TABLE_PHRASE: &str = "table";

/// Smallest mask (pixels) the generator emits.
const MIN_MASK_AREA: usize = 4;
const OBJECT_RADII: [f64; 3] = [0.22, 0.22, 0.28];
const RING_RADIUS: f64 = 0.7;
const TABLE_RADIUS: f64 = 3.8;
// Disc std-dev relative to spiral spacing; wide discs sorted in front of an
// object hide its base.
const TABLE_DISC: f64 = 0.5;
const CAMERA_RADIUS: f64 = 1.5;
const CAMERA_HEIGHT: f64 = 2.5;
const FOV_Y_DEG: f64 = 50.0;

// Independent random streams.
const STREAM_LAYOUT: u64 = 10;
const STREAM_VIEW: u64 = 11;
const STREAM_VIEW_DIRECTION: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Number of object categories `K`.
    pub num_categories: usize,
    /// Training views.
    pub n_views: usize,
    /// Held-out views, interleaved with the training ring.
    pub n_eval_views: usize,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub field_dim: usize,
    pub gaussians_per_object: usize,
    pub table_gaussians: usize,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_categories: 4,
            n_views: 8,
            n_eval_views: 4,
            width: 64,
            height: 64,
            feature_dim: 512,
            field_dim: 8,
            gaussians_per_object: 75,
            table_gaussians: 200,
            corruption: CorruptionSpec::clean(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn total_gaussians(&self) -> usize {
        self.table_gaussians + self.num_categories * self.gaussians_per_object
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        if self.num_categories < 2 || self.n_views < 2 {
            return Err(Error::InvalidConfig("need at least 2 categories and 2 views".into()));
        }
        if self.gaussians_per_object == 0 || self.table_gaussians == 0 || self.feature_dim < 2 || self.field_dim == 0 {
            return Err(Error::InvalidConfig("empty object, table, or feature width".into()));
        }
        Ok(())
    }
}

/// Camera and hidden label maps of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthView {
    pub frame_id: u32,
    pub held_out: bool,
    /// 3x3, row-major
    pub intrinsics: Vec<f64>,
    /// 4x4, row-major
    pub world_to_camera: Vec<f64>,
    /// Entry `k - 1` is the silhouette of category `k`.
    pub categories: Vec<RunLengthRegion>,
    pub table: RunLengthRegion,
    /// Part silhouettes per category, nested inside `categories`.
    pub parts: Vec<Vec<RunLengthRegion>>,
}

impl GroundTruthView {
    pub fn camera(&self) -> Result<CameraPose> {
        CameraPose::new(
            Matrix3::from_row_slice(&self.intrinsics),
            Matrix4::from_row_slice(&self.world_to_camera),
        )
    }

    /// Image size `(width, height)` of this view's masks.
    pub fn dims(&self) -> (usize, usize) {
        (self.table.width(), self.table.height())
    }

    pub fn category_mask(&self, k: usize) -> Result<Bitmap> {
        rle_decode(&self.categories[k - 1])
    }

    /// Per-pixel label: `k` for category `k`, 0 for the table, `None` for
    /// empty pixels.
    pub fn label_grid(&self) -> Result<Vec<Option<u32>>> {
        let table = rle_decode(&self.table)?;
        let mut grid: Vec<Option<u32>> = table.bits().iter().map(|&b| b.then_some(0)).collect();
        for k in 1..=self.categories.len() {
            for i in self.category_mask(k)?.ones() {
                grid[i] = Some(k as u32);
            }
        }
        Ok(grid)
    }
}

/// Everything the generator knows but training must never see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub num_categories: usize,
    pub phrases: Vec<String>,
    /// Clean category embeddings, entry `k - 1` for category `k`.
    pub category_vectors: Vec<Vec<f64>>,
    /// Category of each Gaussian: `1..=K` for objects, 0 for the table.
    pub gaussian_category: Vec<u32>,
    pub gaussian_part: Vec<u32>,
    pub views: Vec<GroundTruthView>,
}

impl GroundTruth {
    pub fn training_views(&self) -> impl Iterator<Item = &GroundTruthView> {
        self.views.iter().filter(|v| !v.held_out)
    }

    pub fn held_out_views(&self) -> impl Iterator<Item = &GroundTruthView> {
        self.views.iter().filter(|v| v.held_out)
    }

    pub fn view(&self, frame_id: u32) -> Option<&GroundTruthView> {
        self.views.iter().find(|v| v.frame_id == frame_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Raw `whole` (objects and table) and `subpart` (object parts, table
    /// halves) layers, plus tracker output.
    pub dataset: Dataset,
    pub ground_truth: GroundTruth,
    /// Reconstructed geometry and colors; semantic channels are zero.
    pub gaussians: Vec<Gaussian>,
    /// Object phrases followed by the table phrase.
    pub queries: QuerySet,
    /// RGB8 renders of the training views.
    pub images: Vec<Vec<u8>>,
}

struct Layout {
    gaussians: Vec<Gaussian>,
    category: Vec<u32>,
    /// Global part id per Gaussian.
    part: Vec<usize>,
    /// Category owning each global part id.
    part_category: Vec<u32>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn layout(spec: &SceneSpec) -> Result<Layout> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_LAYOUT, 0));
    let k = spec.num_categories;
    // Ring wide enough that neighbouring objects do not intersect.
    let ring = RING_RADIUS.max(1.2 * OBJECT_RADII[0] / (PI / k as f64).sin());
    if ring + OBJECT_RADII[0] > 0.8 * TABLE_RADIUS {
        return Err(Error::GenerationFailure(format!("{k} objects do not fit on the table")));
    }
    let mut out = Layout { gaussians: Vec::new(), category: Vec::new(), part: Vec::new(), part_category: Vec::new() };

    // Table: flat discs on a sunflower spiral, split into two halves by y.
    let n = spec.table_gaussians;
    let spacing = TABLE_RADIUS * (PI / n as f64).sqrt();
    let golden = PI * (3.0 - 5f64.sqrt());
    out.part_category.extend([0, 0]);
    for i in 0..n {
        let r = TABLE_RADIUS * ((i as f64 + 0.5) / n as f64).sqrt();
        let a = i as f64 * golden;
        let p = Vector3::new(r * a.cos(), r * a.sin(), 0.0);
        let shade = rng.random_range(-0.04..0.04);
        out.gaussians.push(Gaussian {
            position: p,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::new(TABLE_DISC * spacing, TABLE_DISC * spacing, 0.01),
            alpha_logit: logit(0.98),
            color: [0.55 + shade, 0.45 + shade, 0.35 + shade],
            feature: vec![0.0; spec.field_dim],
        });
        out.category.push(0);
        out.part.push(usize::from(p.y < 0.0));
    }

    // Objects: filled ellipsoids resting on the table, parts are z-slices.
    let [ax, ay, az] = OBJECT_RADII;
    for c in 1..=k {
        let phi = TAU * (c - 1) as f64 / k as f64 + rng.random_range(-0.2..0.2);
        let center = Vector3::new(ring * phi.cos(), ring * phi.sin(), az);
        let n_parts = rng.random_range(2..=4usize);
        let first_part = out.part_category.len();
        out.part_category.extend(std::iter::repeat_n(c as u32, n_parts));
        let base = hsv((c - 1) as f64 / k as f64 + rng.random_range(-0.05..0.05), 0.8, 0.9);
        for _ in 0..spec.gaussians_per_object {
            let u = loop {
                let u = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                if u.norm_squared() <= 1.0 {
                    break u;
                }
            };
            let p = center + Vector3::new(0.8 * ax * u.x, 0.8 * ay * u.y, 0.8 * az * u.z);
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let slice = (((u.z + 1.0) / 2.0) * n_parts as f64).floor().min(n_parts as f64 - 1.0) as usize;
            let jitter = rng.random_range(-0.05..0.05);
            out.gaussians.push(Gaussian {
                position: p,
                rotation: q / q.norm(),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.05..0.08)),
                alpha_logit: logit(0.9),
                color: base.map(|v| (v + jitter).clamp(0.0, 1.0)),
                feature: vec![0.0; spec.field_dim],
            });
            out.category.push(c as u32);
            out.part.push(first_part + slice);
        }
    }
    quantize_scene(&mut out.gaussians);
    Ok(out)
}

fn ring_camera(spec: &SceneSpec, azimuth: f64, lift: f64) -> Result<CameraPose> {
    let eye = Vector3::new(CAMERA_RADIUS * azimuth.cos(), CAMERA_RADIUS * azimuth.sin(), CAMERA_HEIGHT + lift);
    CameraPose::look_at(
        spec.width,
        spec.height,
        FOV_Y_DEG.to_radians(),
        eye,
        Vector3::new(0.0, 0.0, 0.15),
        Vector3::new(0.0, 0.0, 1.0),
    )
}

/// Per-pixel argmax of rendered one-hot labels; `None` where the winning
/// label's blended weight is below one half.
fn label_map(layout: &Layout, labels: &[usize], n_labels: usize, camera: &CameraPose, spec: &SceneSpec) -> Result<Vec<Option<usize>>> {
    let scene: Vec<Gaussian> = layout
        .gaussians
        .iter()
        .zip(labels)
        .map(|(g, &l)| {
            let mut feature = vec![0.0; n_labels];
            feature[l] = 1.0;
            Gaussian { feature, ..g.clone() }
        })
        .collect();
    let out = render(&scene, camera, spec.width, spec.height)?;
    Ok((0..spec.width * spec.height)
        .map(|p| {
            let f = &out.feature[p * n_labels..(p + 1) * n_labels];
            let (best, value) = f.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            (value >= 0.5).then_some(best)
        })
        .collect())
}

struct ViewTruth {
    gt: GroundTruthView,
    /// Object silhouettes (index k-1) then the table.
    regions: Vec<Bitmap>,
    /// (owning category, silhouette) per part, table halves included.
    part_regions: Vec<(u32, Bitmap)>,
}

fn view_truth(layout: &Layout, spec: &SceneSpec, frame_id: u32, held_out: bool, camera: &CameraPose) -> Result<ViewTruth> {
    let k = spec.num_categories;
    let cats: Vec<usize> = layout.category.iter().map(|&c| c as usize).collect();
    let cat_map = label_map(layout, &cats, k + 1, camera, spec)?;
    let part_map = label_map(layout, &layout.part, layout.part_category.len(), camera, spec)?;
    let (w, h) = (spec.width, spec.height);
    let region = |c: usize| Bitmap::from_fn(w, h, |x, y| cat_map[y * w + x] == Some(c));
    let mut regions: Vec<Bitmap> = (1..=k).map(region).collect();
    regions.push(region(0));

    // Parts nest inside their category: a pixel's part is the heaviest
    // part of the pixel's category, falling back to the first such part.
    let mut part_regions: Vec<(u32, Bitmap)> =
        layout.part_category.iter().map(|&c| (c, Bitmap::new(w, h))).collect();
    for p in 0..w * h {
        let Some(c) = cat_map[p] else { continue };
        let part = match part_map[p] {
            Some(q) if layout.part_category[q] as usize == c => q,
            _ => layout.part_category.iter().position(|&pc| pc as usize == c).unwrap(),
        };
        part_regions[part].1.set_index(p, true);
    }
    let mut parts = vec![Vec::new(); k];
    for (c, b) in &part_regions {
        if *c > 0 {
            parts[*c as usize - 1].push(rle_encode(b));
        }
    }
    let gt = GroundTruthView {
        frame_id,
        held_out,
        intrinsics: camera.intrinsics.transpose().as_slice().to_vec(),
        world_to_camera: camera.world_to_camera.transpose().as_slice().to_vec(),
        categories: regions[..k].iter().map(rle_encode).collect(),
        table: rle_encode(&regions[k]),
        parts,
    };
    Ok(ViewTruth { gt, regions, part_regions })
}

fn quantize_vector(v: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize_rows(&to_f32_rows(&[v.to_vec()]))?.remove(0))
}

/// Builds a scene deterministically from `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::GenerationFailure(format!(
            "{}x{} is too small to place {} objects",
            spec.width, spec.height, spec.num_categories
        )));
    }
    let k = spec.num_categories;
    let layout = layout(spec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_LAYOUT, 1));
    // Entry k is the (unqueried) table.
    let vectors: Vec<Vec<f64>> = category_vectors(k + 1, spec.feature_dim, &mut rng)?
        .iter()
        .map(|v| quantize_vector(v))
        .collect::<Result<_>>()?;

    let n_eval = spec.n_eval_views;
    let step = TAU / spec.n_views as f64;
    let mut cams: Vec<(u32, bool, CameraPose)> = Vec::new();
    for i in 0..spec.n_views {
        let lift = if i % 2 == 0 { 0.1 } else { -0.1 };
        cams.push((i as u32, false, ring_camera(spec, i as f64 * step, lift)?));
    }
    for j in 0..n_eval {
        let slot = (j * spec.n_views) / n_eval.max(1);
        cams.push(((spec.n_views + j) as u32, true, ring_camera(spec, (slot as f64 + 0.5) * step, 0.0)?));
    }

    let truths: Vec<ViewTruth> = cams
        .par_iter()
        .map(|(id, held_out, cam)| view_truth(&layout, spec, *id, *held_out, cam))
        .collect::<Result<_>>()?;
    for c in 1..=k {
        let seen = truths.iter().filter(|t| !t.gt.held_out).any(|t| t.regions[c - 1].count() >= MIN_MASK_AREA);
        if !seen {
            return Err(Error::GenerationFailure(format!(
                "category {c} is not visible in any training view at {}x{}",
                spec.width, spec.height
            )));
        }
    }

    let mut frames = Vec::new();
    let mut whole = MaskLayer { tag: LayerTag::Whole, masks: Vec::new(), features: Vec::new() };
    let mut subpart = MaskLayer { tag: LayerTag::Subpart, masks: Vec::new(), features: Vec::new() };
    let mut images = Vec::new();
    let mut propagated = Vec::new();
    let color_scene = &layout.gaussians;
    let view_seed = derive_seed(spec.seed, spec.corruption.seed, 0);
    for (truth, (frame_id, _, cam)) in truths.iter().zip(&cams).filter(|(t, _)| !t.gt.held_out) {
        let frame_id = *frame_id;
        let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(view_seed, STREAM_VIEW, frame_id as u64));
        let view_dir = random_unit(
            &mut ChaCha8Rng::seed_from_u64(derive_seed(view_seed, STREAM_VIEW_DIRECTION, frame_id as u64)),
            spec.feature_dim,
        );
        let mut next_id = 0u32;
        // Draws are made for every candidate, kept or not, so the random
        // stream does not depend on visibility decisions.
        let mut emit = |layer: &mut MaskLayer, region: &Bitmap, category: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            let occluded = rng.random::<f64>() < spec.corruption.occlusion_rate;
            let mut other = rng.random_range(0..k);
            if other >= category {
                other += 1;
            }
            let pred_iou = rng.random_range(0.9..1.0);
            let stability = rng.random_range(0.9..1.0);
            let cut = truncate_half_plane(region, rng);
            if region.count() < MIN_MASK_AREA {
                return Ok(());
            }
            let region = if occluded { cut } else { region.clone() };
            let vector = quantize_vector(&corrupt_feature(&vectors[category], &vectors[other], &view_dir, &spec.corruption))?;
            let id = next_id;
            next_id += 1;
            layer.masks.push(Mask::new(id, frame_id, &region, pred_iou, stability));
            layer.features.push(SemanticFeature { mask_ref: MaskRef { frame_id, mask_id: id }, vector });
            Ok(())
        };
        // Objects use vector index c-1, the table index k.
        for c in 1..=k {
            emit(&mut whole, &truth.regions[c - 1], c - 1, &mut vrng)?;
        }
        emit(&mut whole, &truth.regions[k], k, &mut vrng)?;
        for (c, region) in &truth.part_regions {
            let idx = if *c == 0 { k } else { *c as usize - 1 };
            emit(&mut subpart, region, idx, &mut vrng)?;
        }

        let out = render(color_scene, cam, spec.width, spec.height)?;
        images.push(out.color.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect());
        frames.push(Frame {
            frame_id,
            width: spec.width,
            height: spec.height,
            camera: cam.clone(),
            image_path: Some(format!("images/frame_{frame_id:04}.png")),
        });
        let eroded = truth.regions[..k].iter().map(|b| b.erode(spec.corruption.propagation_erosion)).collect();
        propagated.push(PropagatedMaskSet { frame_id, masks: eroded });
    }

    let mut phrases: Vec<String> = (1..=k).map(|c| format!("object {c}")).collect();
    phrases.push(TABLE_PHRASE.into());
    let queries = QuerySet::new(phrases.clone(), vectors.clone())?;
    let ground_truth = GroundTruth {
        num_categories: k,
        phrases: phrases[..k].to_vec(),
        category_vectors: vectors[..k].to_vec(),
        gaussian_category: layout.category.clone(),
        gaussian_part: layout.part.iter().map(|&p| p as u32).collect(),
        views: truths.into_iter().map(|t| t.gt).collect(),
    };
    let dataset = Dataset {
        name: format!("synthetic-k{k}-s{}", spec.seed),
        feature_dim: spec.feature_dim,
        field_dim: spec.field_dim,
        frames,
        layers: vec![subpart, whole],
        propagated: Some(propagated),
    };
    Ok(SyntheticScene { spec: *spec, dataset, ground_truth, gaussians: layout.gaussians, queries, images })
}

impl SyntheticScene {
    /// Tracker output for one training frame: the ground-truth category
    /// silhouettes, eroded by the corruption spec.
    pub fn propagated(&self, frame_id: u32) -> Result<PropagatedMaskSet> {
        let view = self
            .ground_truth
            .view(frame_id)
            .filter(|v| !v.held_out)
            .ok_or_else(|| Error::MissingArtifact(format!("frame {frame_id} is not a training view")))?;
        let masks = (1..=self.ground_truth.num_categories)
            .map(|c| Ok(view.category_mask(c)?.erode(self.spec.corruption.propagation_erosion)))
            .collect::<Result<_>>()?;
        Ok(PropagatedMaskSet { frame_id, masks })
    }

    /// Writes the dataset, images, query set, scene checkpoint and
    /// ground truth under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        save_dataset(&self.dataset, root)?;
        let images = root.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (frame, rgb) in self.dataset.frames.iter().zip(&self.images) {
            let path = root.join(frame.image_path.as_deref().unwrap());
            image::save_buffer(&path, rgb, frame.width as u32, frame.height as u32, image::ColorType::Rgb8)?;
        }
        self.queries.save(&root.join(QUERIES))?;
        save_scene(&self.gaussians, &root.join(SCENE))?;
        self.ground_truth.save(&root.join(GROUND_TRUTH))
    }
}

/// Mean pairwise cosine within and across ground-truth categories.
pub fn consistency_score(features: &[Vec<f64>], categories: &[usize]) -> Result<(f64, f64)> {
    if features.len() != categories.len() {
        return Err(Error::ShapeError(format!("{} features, {} categories", features.len(), categories.len())));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let c = crate::ccl::cosine(&features[i], &features[j]);
            if categories[i] == categories[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::EmptyPairSet);
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccl::cosine;

    fn small(corruption: CorruptionSpec) -> SceneSpec {
        SceneSpec { feature_dim: 64, corruption, ..SceneSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(CorruptionSpec { occlusion_rate: 0.3, blur_mix: 0.2, view_rot_deg: 10.0, ..CorruptionSpec::clean() });
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.gaussians, b.gaussians);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn clean_features_equal_their_category_vector() {
        let scene = generate(&small(CorruptionSpec::clean())).unwrap();
        let gt = &scene.ground_truth;
        let whole = scene.dataset.layer(LayerTag::Whole).unwrap();
        let mut objects = 0;
        for (mask, feature) in whole.masks.iter().zip(&whole.features) {
            let bitmap = mask.bitmap().unwrap();
            let view = gt.view(mask.frame_id).unwrap();
            let owner = (1..=gt.num_categories).find(|&c| view.category_mask(c).unwrap() == bitmap);
            let expected = match owner {
                Some(c) => {
                    objects += 1;
                    &gt.category_vectors[c - 1]
                }
                None => scene.queries.embeddings.last().unwrap(),
            };
            assert!(cosine(&feature.vector, expected) > 1.0 - 1e-9);
        }
        assert!(objects >= gt.num_categories);
    }

    #[test]
    fn table_fills_the_background() {
        let scene = generate(&small(CorruptionSpec::clean())).unwrap();
        for view in &scene.ground_truth.views {
            let mut covered = rle_decode(&view.table).unwrap();
            for c in 1..=scene.ground_truth.num_categories {
                covered.or_assign(&view.category_mask(c).unwrap());
            }
            let frac = covered.count() as f64 / covered.len() as f64;
            assert!(frac >= 0.99, "frame {}: {frac}", view.frame_id);
        }
    }

    #[test]
    fn parts_nest_inside_categories_and_every_object_is_seen() {
        let scene = generate(&small(CorruptionSpec::clean())).unwrap();
        let gt = &scene.ground_truth;
        for c in 1..=gt.num_categories {
            let area: usize = gt.training_views().map(|v| v.category_mask(c).unwrap().count()).sum();
            assert!(area > 0, "category {c} never visible");
        }
        for view in &gt.views {
            for (c, parts) in view.parts.iter().enumerate() {
                let whole = view.category_mask(c + 1).unwrap();
                let mut union = Bitmap::new(whole.width(), whole.height());
                for p in parts {
                    let p = rle_decode(p).unwrap();
                    assert!(p.is_subset_of(&whole));
                    union.or_assign(&p);
                }
                assert_eq!(union, whole);
            }
        }
    }

    #[test]
    fn mask_ids_are_unique_per_frame() {
        let scene = generate(&small(CorruptionSpec { occlusion_rate: 0.5, ..CorruptionSpec::clean() })).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for layer in &scene.dataset.layers {
            for m in &layer.masks {
                assert!(seen.insert((m.frame_id, m.mask_id)));
            }
        }
    }

    #[test]
    fn held_out_views_interleave_training_views() {
        let scene = generate(&small(CorruptionSpec::clean())).unwrap();
        let gt = &scene.ground_truth;
        assert_eq!(gt.training_views().count(), scene.spec.n_views);
        assert_eq!(gt.held_out_views().count(), scene.spec.n_eval_views);
        assert_eq!(scene.dataset.frames.len(), scene.spec.n_views);
        assert!(gt.held_out_views().all(|v| scene.dataset.frame(v.frame_id).is_none()));
    }

    #[test]
    fn saved_scene_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate(&small(CorruptionSpec { blur_mix: 0.1, ..CorruptionSpec::clean() })).unwrap();
        scene.save(dir.path()).unwrap();
        assert_eq!(crate::store::load_dataset(dir.path()).unwrap(), scene.dataset);
        assert_eq!(GroundTruth::load(&dir.path().join(GROUND_TRUTH)).unwrap(), scene.ground_truth);
        assert_eq!(QuerySet::load(&dir.path().join(QUERIES)).unwrap(), scene.queries);
        assert_eq!(crate::splat::load_scene(&dir.path().join(SCENE)).unwrap(), scene.gaussians);
        assert!(dir.path().join("images/frame_0000.png").exists());
    }

    #[test]
    fn oracle_propagation_erodes_ground_truth() {
        let spec = small(CorruptionSpec { propagation_erosion: 1, ..CorruptionSpec::clean() });
        let scene = generate(&spec).unwrap();
        let p = scene.propagated(0).unwrap();
        let gt = scene.ground_truth.view(0).unwrap();
        for (c, m) in p.masks.iter().enumerate() {
            assert!(m.is_subset_of(&gt.category_mask(c + 1).unwrap()));
        }
        assert!(matches!(scene.propagated(999), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn tiny_images_fail_generation() {
        let spec = SceneSpec { width: 8, height: 8, ..small(CorruptionSpec::clean()) };
        assert!(matches!(generate(&spec), Err(Error::GenerationFailure(_))));
    }

    #[test]
    fn consistency_needs_both_pair_kinds() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(consistency_score(&f, &[0, 0]), Err(Error::EmptyPairSet)));
        let (intra, inter) = consistency_score(&[f[0].clone(), f[0].clone(), f[1].clone()], &[0, 0, 1]).unwrap();
        assert!((intra - 1.0).abs() < 1e-12 && inter.abs() < 1e-12);
    }
}
