//! End-to-end composition of the stages: association, codebook learning,
//! index maps, field training, and querying of the trained model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitmap::Bitmap;
use crate::ccl::{build_index_map, train_codebook, CclConfig, IndexMap, TrainedCodebook};
use crate::error::{Error, Result};
use crate::field::{argmax, decode, init_field_features, train_field, Decoder, FieldTrainConfig, TrainedField};
use crate::masks::{associate_frame, filter_masks, merge_scales, CandidateMask, FilterThresholds};
use crate::query::{prototype_relevance, segment, RelevanceMap, RelevanceMode, DEFAULT_THRESHOLD};
use crate::splat::{render, Gaussian};
use crate::store::{
    CameraPose, Codebook, Dataset, LayerTag, Mask, MaskLayer, MaskRef, QuerySet, Scale, SemanticFeature, SourceScale,
};
use crate::synth::{derive_seed, SceneSpec};

const STREAM_CCL: u64 = 100;
const STREAM_FIELD: u64 = 101;
const STREAM_FEATURES: u64 = 102;
const STREAM_DECODER: u64 = 103;

/// One value per aggregated mask scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerScale<T> {
    pub sp: T,
    pub wp: T,
}

impl<T> PerScale<T> {
    pub fn get(&self, scale: Scale) -> &T {
        match scale {
            Scale::Sp => &self.sp,
            Scale::Wp => &self.wp,
        }
    }

    pub fn try_build(mut f: impl FnMut(Scale) -> Result<T>) -> Result<Self> {
        Ok(Self { sp: f(Scale::Sp)?, wp: f(Scale::Wp)? })
    }

    pub fn map<U>(&self, mut f: impl FnMut(Scale, &T) -> U) -> PerScale<U> {
        PerScale { sp: f(Scale::Sp, &self.sp), wp: f(Scale::Wp, &self.wp) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    #[serde(flatten)]
    pub thresholds: FilterThresholds,
    /// A mask takes a tracked category's label when their IoU exceeds this.
    pub association_iou: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { thresholds: FilterThresholds::default(), association_iou: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub threshold: f64,
    pub relevance: RelevanceMode,
    /// Field used to classify Gaussians for 3D selection.
    pub edit_scale: Scale,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, relevance: RelevanceMode::Calibrated, edit_scale: Scale::Wp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Input dataset (and, for synthetic scenes, ground truth).
    pub data: String,
    /// Stage artifacts.
    pub work: String,
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: "data".into(), work: "work".into(), report: "report".into() }
    }
}

/// Every tunable of a run. Stage seeds are derived from `seed` and the
/// per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SceneSpec,
    pub masks: MaskConfig,
    pub ccl: CclConfig,
    pub field: FieldTrainConfig,
    pub query: QueryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SceneSpec::default(),
            masks: MaskConfig::default(),
            ccl: CclConfig::default(),
            field: FieldTrainConfig::default(),
            query: QueryConfig::default(),
        }
    }
}

fn digest(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let config: Self = parsed.map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.ccl.validate()?;
        self.field.validate()?;
        let t = &self.masks.thresholds;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![t.min_pred_iou, t.min_stability, t.max_overlap, self.masks.association_iou, self.query.threshold]
            .into_iter()
            .all(unit)
        {
            return Err(Error::InvalidConfig("mask and query thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Hash of the settings a stage's artifacts depend on; artifacts from
    /// an upstream stage are only reused when these agree.
    pub fn stage_key(&self, stage: Stage) -> String {
        let synth = digest(&(self.seed, &self.synth));
        let masks = digest(&(synth.as_str(), &self.masks));
        let ccl = digest(&(masks.as_str(), &self.ccl));
        let field = digest(&(ccl.as_str(), &self.field));
        let query = digest(&(field.as_str(), &self.query));
        match stage {
            Stage::Synth => synth,
            Stage::Associate => masks,
            Stage::TrainCodebook | Stage::Index => ccl,
            Stage::TrainField => field,
            Stage::Query => query,
        }
    }

    pub fn effective_ccl(&self) -> CclConfig {
        CclConfig { seed: derive_seed(self.seed, STREAM_CCL, self.ccl.seed), ..self.ccl }
    }

    pub fn effective_field(&self) -> FieldTrainConfig {
        FieldTrainConfig { seed: derive_seed(self.seed, STREAM_FIELD, self.field.seed), ..self.field }
    }
}

/// Stage families that produce reusable artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Associate,
    TrainCodebook,
    Index,
    TrainField,
    Query,
}

fn candidates(layer: Option<&MaskLayer>, frame_id: u32, source: SourceScale) -> Result<Vec<CandidateMask>> {
    layer.map_or(Ok(Vec::new()), |l| {
        l.frame_masks(frame_id).map(|(m, _)| CandidateMask::from_mask(m, source)).collect()
    })
}

/// Builds labelled `sp`/`wp` layers.
///
/// Raw `subpart`/`part`/`whole` proposals are merged into the two scales
/// and filtered; a dataset that already carries `sp`/`wp` layers is taken
/// as filtered. Every mask is then labelled against the frame's
/// propagated category masks.
pub fn associate(dataset: &Dataset, config: &MaskConfig) -> Result<Dataset> {
    let raw = [LayerTag::Subpart, LayerTag::Part, LayerTag::Whole].map(|t| dataset.layer(t));
    let has_raw = raw.iter().any(Option::is_some);
    let features: BTreeMap<MaskRef, &SemanticFeature> =
        dataset.layers.iter().flat_map(|l| l.features.iter().map(|f| (f.mask_ref, f))).collect();

    let per_frame = dataset
        .frames
        .par_iter()
        .map(|frame| {
            let fid = frame.frame_id;
            let propagated = dataset
                .propagated_for(fid)
                .ok_or_else(|| Error::MissingArtifact(format!("propagated masks for frame {fid}")))?;
            let filtered: PerScale<Vec<Mask>> = if has_raw {
                let (sp, wp) = merge_scales(
                    &candidates(raw[0], fid, SourceScale::Subpart)?,
                    &candidates(raw[1], fid, SourceScale::Part)?,
                    &candidates(raw[2], fid, SourceScale::Whole)?,
                )?;
                PerScale { sp: filter_masks(&sp, &config.thresholds), wp: filter_masks(&wp, &config.thresholds) }
            } else {
                PerScale::try_build(|s| {
                    let layer = dataset
                        .layer(s.into())
                        .ok_or_else(|| Error::MissingArtifact(format!("mask layer `{s}`")))?;
                    Ok(layer.frame_masks(fid).map(|(m, _)| m.clone()).collect())
                })?
            };
            PerScale::try_build(|s| associate_frame(filtered.get(s), propagated, config.association_iou))
        })
        .collect::<Result<Vec<_>>>()?;

    let layers = [Scale::Sp, Scale::Wp]
        .into_iter()
        .map(|s| {
            let masks: Vec<Mask> = per_frame.iter().flat_map(|f| f.get(s).iter().cloned()).collect();
            let features = masks
                .iter()
                .map(|m| {
                    let r = MaskRef { frame_id: m.frame_id, mask_id: m.mask_id };
                    features
                        .get(&r)
                        .map(|f| (*f).clone())
                        .ok_or_else(|| Error::MissingArtifact(format!("feature of mask {}/{}", r.frame_id, r.mask_id)))
                })
                .collect::<Result<_>>()?;
            Ok(MaskLayer { tag: s.into(), masks, features })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { layers, ..dataset.clone() })
}

fn scale_layer(dataset: &Dataset, scale: Scale) -> Result<&MaskLayer> {
    dataset
        .layer(scale.into())
        .ok_or_else(|| Error::MissingArtifact(format!("associated `{scale}` layer (run associate first)")))
}

/// Features and association labels of one associated scale.
pub fn labeled_features(dataset: &Dataset, scale: Scale) -> Result<(Vec<Vec<f64>>, Vec<i32>)> {
    let layer = scale_layer(dataset, scale)?;
    Ok((layer.features.iter().map(|f| f.vector.clone()).collect(), layer.masks.iter().map(|m| m.label).collect()))
}

pub fn train_codebooks(dataset: &Dataset, config: &CclConfig) -> Result<PerScale<TrainedCodebook>> {
    let (sp, wp) = rayon::join(
        || {
            let (f, l) = labeled_features(dataset, Scale::Sp)?;
            train_codebook(&f, &l, config)
        },
        || {
            let (f, l) = labeled_features(dataset, Scale::Wp)?;
            train_codebook(&f, &l, config)
        },
    );
    Ok(PerScale { sp: sp?, wp: wp? })
}

pub fn build_index_maps(dataset: &Dataset, codebooks: &PerScale<Codebook>) -> Result<PerScale<Vec<IndexMap>>> {
    PerScale::try_build(|s| {
        let layer = scale_layer(dataset, s)?;
        dataset
            .frames
            .par_iter()
            .map(|f| {
                let masks: Vec<_> = layer.frame_masks(f.frame_id).collect();
                build_index_map(f.frame_id, s, f.width, f.height, &masks, codebooks.get(s))
            })
            .collect()
    })
}

/// A trained per-scale semantic field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleField {
    pub scene: Vec<Gaussian>,
    pub decoder: Decoder,
}

pub fn train_fields(
    scene: &[Gaussian],
    dataset: &Dataset,
    index_maps: &PerScale<Vec<IndexMap>>,
    codebooks: &PerScale<Codebook>,
    images: Option<&[Vec<u8>]>,
    config: &FieldTrainConfig,
) -> Result<PerScale<TrainedField>> {
    let d_f = dataset.field_dim;
    let train = |s: Scale| {
        let stream = match s {
            Scale::Sp => 0,
            Scale::Wp => 1,
        };
        let mut init = scene.to_vec();
        init_field_features(&mut init, d_f, config.feature_init_std, derive_seed(config.seed, STREAM_FEATURES, stream));
        let decoder = Decoder::new(
            d_f,
            config.hidden,
            codebooks.get(s).n_prototypes(),
            derive_seed(config.seed, STREAM_DECODER, stream),
        );
        train_field(&init, &dataset.frames, index_maps.get(s), images, decoder, config)
    };
    let (sp, wp) = rayon::join(|| train(Scale::Sp), || train(Scale::Wp));
    Ok(PerScale { sp: sp?, wp: wp? })
}

/// Codebooks plus fields: everything needed to answer queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticModel {
    pub codebooks: PerScale<Codebook>,
    pub fields: PerScale<ScaleField>,
}

impl SemanticModel {
    /// Argmax codebook category of every pixel of one scale's render.
    pub fn category_grid(&self, scale: Scale, camera: &CameraPose, width: usize, height: usize) -> Result<Vec<usize>> {
        let field = self.fields.get(scale);
        let out = render(&field.scene, camera, width, height)?;
        Ok(decode(&out.feature, &field.decoder)?.probs.chunks(field.decoder.n_out).map(argmax).collect())
    }

    /// Per-scale relevance maps of `phrase` for one view.
    pub fn relevance(
        &self,
        grids: &PerScale<Vec<usize>>,
        width: usize,
        height: usize,
        phrase: &str,
        queries: &QuerySet,
        mode: RelevanceMode,
    ) -> Result<PerScale<RelevanceMap>> {
        PerScale::try_build(|s| {
            let per_proto = prototype_relevance(self.codebooks.get(s), phrase, queries, mode)?;
            Ok(RelevanceMap {
                phrase: phrase.into(),
                scale: Some(s),
                width,
                height,
                grid: grids.get(s).iter().map(|&j| per_proto[j]).collect(),
            })
        })
    }

    pub fn grids(&self, camera: &CameraPose, width: usize, height: usize) -> Result<PerScale<Vec<usize>>> {
        PerScale::try_build(|s| self.category_grid(s, camera, width, height))
    }

    /// Thresholded maximum over both scales.
    pub fn segment(
        &self,
        camera: &CameraPose,
        width: usize,
        height: usize,
        phrase: &str,
        queries: &QuerySet,
        config: &QueryConfig,
    ) -> Result<Bitmap> {
        let grids = self.grids(camera, width, height)?;
        let maps = self.relevance(&grids, width, height, phrase, queries, config.relevance)?;
        segment(&[&maps.sp, &maps.wp], config.threshold)
    }
}

/// All intermediate products of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub associated: Dataset,
    pub codebooks: PerScale<TrainedCodebook>,
    pub index_maps: PerScale<Vec<IndexMap>>,
    pub fields: PerScale<TrainedField>,
}

impl PipelineRun {
    pub fn model(&self) -> SemanticModel {
        SemanticModel {
            codebooks: self.codebooks.map(|_, c| c.codebook.clone()),
            fields: self.fields.map(|_, f| ScaleField { scene: f.scene.clone(), decoder: f.decoder.clone() }),
        }
    }
}

/// Associate, learn codebooks, build index maps, train both fields.
pub fn run_pipeline(
    dataset: &Dataset,
    scene: &[Gaussian],
    images: Option<&[Vec<u8>]>,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    config.validate()?;
    let associated = associate(dataset, &config.masks)?;
    let codebooks = train_codebooks(&associated, &config.effective_ccl())?;
    let tables = codebooks.map(|_, c| c.codebook.clone());
    let index_maps = build_index_maps(&associated, &tables)?;
    let fields = train_fields(scene, &associated, &index_maps, &tables, images, &config.effective_field())?;
    Ok(PipelineRun { associated, codebooks, index_maps, fields })
}
