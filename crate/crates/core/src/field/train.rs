use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ce_loss_and_grad, decode, Decoder, DEFAULT_HIDDEN};
use crate::ccl::IndexMap;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::splat::{render, render_backward, Gaussian, RenderOptions, RenderState};
use crate::store::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    /// Geometry, opacity and color frozen; only `f_i` and the decoder move.
    SemanticOnly,
    /// Adds an L1 photometric loss and optimizes every Gaussian parameter.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub mode: FieldMode,
    /// Weight of the L1 color term in `Joint` mode.
    pub color_loss_weight: f64,
    pub hidden: usize,
    /// Keep the decoder fixed and optimize Gaussian features only.
    pub freeze_decoder: bool,
    /// Standard deviation of the initial Gaussian features.
    pub feature_init_std: f64,
    pub seed: u64,
}

impl Default for FieldTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            mode: FieldMode::SemanticOnly,
            color_loss_weight: 1.0,
            hidden: DEFAULT_HIDDEN,
            freeze_decoder: false,
            feature_init_std: 0.01,
            seed: 0,
        }
    }
}

impl FieldTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.feature_init_std >= 0.0) {
            return Err(Error::InvalidConfig("feature_init_std must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.hidden == 0 || self.color_loss_weight < 0.0 {
            return Err(Error::InvalidConfig("learning rate, hidden width and color weight must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, betas: self.adam_betas, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldLoss {
    pub iteration: usize,
    pub frame_id: u32,
    pub ce: f64,
    /// L1 color term (zero in semantic-only mode).
    pub color: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedField {
    pub scene: Vec<Gaussian>,
    pub decoder: Decoder,
    pub loss_trace: Vec<FieldLoss>,
}

/// Replaces every Gaussian's semantic channel with `d_f` seeded normal
/// values of standard deviation `std`.
pub fn init_field_features(scene: &mut [Gaussian], d_f: usize, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in scene {
        g.feature = (0..d_f).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    }
}

pub fn write_loss_trace(path: &Path, trace: &[FieldLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in trace {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::SchemaViolation(format!("{}: {other:?}", path.display())),
    }
}

struct View<'a> {
    frame: &'a Frame,
    map: &'a IndexMap,
    image: Option<Vec<f64>>,
}

// Joint-mode parameter row: p(3) r(4) s(3) logit(1) c(3)
const GEOMETRY_PARAMS: usize = 14;
const MIN_SCALE: f64 = 1e-4;

fn geometry_row(g: &Gaussian) -> [f64; GEOMETRY_PARAMS] {
    let mut row = [0.0; GEOMETRY_PARAMS];
    row[0..3].copy_from_slice(g.position.as_slice());
    row[3..7].copy_from_slice(g.rotation.as_slice());
    row[7..10].copy_from_slice(g.scale.as_slice());
    row[10] = g.alpha_logit;
    row[11..14].copy_from_slice(&g.color);
    row
}

fn apply_geometry_row(g: &mut Gaussian, row: &[f64]) {
    g.position.copy_from_slice(&row[0..3]);
    g.rotation.copy_from_slice(&row[3..7]);
    g.scale.copy_from_slice(&row[7..10]);
    g.alpha_logit = row[10];
    g.color.copy_from_slice(&row[11..14]);
}

/// Optimizes the semantic field of `scene` against one scale's index maps,
/// sampling one training view per iteration.
///
/// `images` (RGB8, in `frames` order) are required in `Joint` mode.
pub fn train_field(
    scene: &[Gaussian],
    frames: &[Frame],
    maps: &[IndexMap],
    images: Option<&[Vec<u8>]>,
    decoder: Decoder,
    config: &FieldTrainConfig,
) -> Result<TrainedField> {
    config.validate()?;
    decoder.validate()?;
    let n = scene.len();
    let d_f = decoder.d_in;
    if n == 0 {
        return Err(Error::EmptyDataset("scene has no Gaussians".into()));
    }
    if scene.iter().any(|g| g.feature.len() != d_f) {
        return Err(Error::ShapeError(format!("scene features are not {d_f} wide")));
    }
    let joint = config.mode == FieldMode::Joint;
    if joint && images.is_none_or(|im| im.len() != frames.len()) {
        return Err(Error::MissingArtifact("joint training needs one image per training frame".into()));
    }

    let mut views = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let map = maps
            .iter()
            .find(|m| m.frame_id == frame.frame_id)
            .ok_or_else(|| Error::MissingArtifact(format!("index map for frame {}", frame.frame_id)))?;
        if map.width != frame.width || map.height != frame.height {
            return Err(Error::ShapeError(format!("index map of frame {} has the wrong size", frame.frame_id)));
        }
        if map.assigned_count() == 0 {
            continue;
        }
        let image = if joint {
            let rgb = &images.unwrap()[i];
            if rgb.len() != frame.width * frame.height * 3 {
                return Err(Error::ShapeError(format!("image of frame {} has the wrong size", frame.frame_id)));
            }
            Some(rgb.iter().map(|&v| v as f64 / 255.0).collect())
        } else {
            None
        };
        views.push(View { frame, map, image });
    }
    if views.is_empty() {
        return Err(Error::EmptySupervision);
    }

    let mut scene = scene.to_vec();
    let mut decoder = decoder;
    let mut features: Vec<f64> = scene.iter().flat_map(|g| g.feature.iter().copied()).collect();
    let mut geometry: Vec<f64> = scene.iter().flat_map(geometry_row).collect();
    let adam = config.adam();
    let mut opt_features = Adam::new(adam, features.len());
    let mut opt_geometry = Adam::new(adam, if joint { geometry.len() } else { 0 });
    let mut opt_decoder = [&decoder.w1, &decoder.b1, &decoder.w2, &decoder.b2].map(|t| Adam::new(adam, t.len()));

    // Frozen geometry: contributor lists never change, so render once per view.
    let states: Vec<Option<RenderState>> = if joint {
        views.iter().map(|_| None).collect()
    } else {
        views
            .par_iter()
            .map(|v| render(&scene, &v.frame.camera, v.frame.width, v.frame.height).map(|o| Some(o.state)))
            .collect::<Result<_>>()?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let vi = rng.random_range(0..views.len());
        let view = &views[vi];
        let (w, h) = (view.frame.width, view.frame.height);
        let fail = |what: &str| Error::NumericalFailure { step: iteration, what: what.into() };

        let (rendered, f_hat, color_loss, d_color) = if let Some(state) = &states[vi] {
            let refs: Vec<&[f64]> = features.chunks(d_f).collect();
            (None, state.blend(&refs, d_f), 0.0, Vec::new())
        } else {
            for (g, (f, row)) in scene.iter_mut().zip(features.chunks(d_f).zip(geometry.chunks(GEOMETRY_PARAMS))) {
                g.feature.copy_from_slice(f);
                apply_geometry_row(g, row);
            }
            let out = render(&scene, &view.frame.camera, w, h)?;
            let image = view.image.as_ref().unwrap();
            let k = config.color_loss_weight / image.len() as f64;
            let mut l1 = 0.0;
            let d_color: Vec<f64> = out
                .color
                .iter()
                .zip(image)
                .map(|(c, t)| {
                    l1 += (c - t).abs();
                    k * (c - t).signum() * f64::from(c != t)
                })
                .collect();
            let f_hat = out.feature.clone();
            (Some(out), f_hat, config.color_loss_weight * l1 / image.len() as f64, d_color)
        };

        let decoded = decode(&f_hat, &decoder)?;
        let (ce, d_logits) = ce_loss_and_grad(&decoded, &view.map.grid)?;
        if !ce.is_finite() || !color_loss.is_finite() {
            return Err(fail("non-finite loss"));
        }
        let (d_dec, d_f_hat) = decoder.backward(&f_hat, &decoded, &d_logits)?;

        let grad_features: Vec<f64> = match (&states[vi], rendered) {
            (Some(state), _) => state.blend_backward(&d_f_hat, d_f, n).concat(),
            (None, Some(out)) => {
                let g = render_backward(
                    &out.state,
                    &scene,
                    &view.frame.camera,
                    &RenderOptions::default(),
                    &d_color,
                    &d_f_hat,
                    true,
                )?;
                let (pos, rot, scl) = (g.position.unwrap(), g.rotation.unwrap(), g.scale.unwrap());
                let grad_geometry: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        let mut row = [0.0; GEOMETRY_PARAMS];
                        row[0..3].copy_from_slice(pos[i].as_slice());
                        row[3..7].copy_from_slice(rot[i].as_slice());
                        row[7..10].copy_from_slice(scl[i].as_slice());
                        row[10] = g.alpha_logit[i];
                        row[11..14].copy_from_slice(&g.color[i]);
                        row
                    })
                    .collect();
                if grad_geometry.iter().any(|v| !v.is_finite()) {
                    return Err(fail("non-finite geometry gradient"));
                }
                opt_geometry.step(&mut geometry, &grad_geometry);
                for row in geometry.chunks_mut(GEOMETRY_PARAMS) {
                    row[7..10].iter_mut().for_each(|s| *s = s.max(MIN_SCALE));
                    row[11..14].iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
                }
                g.feature.concat()
            }
            (None, None) => unreachable!(),
        };
        if grad_features.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature gradient"));
        }
        opt_features.step(&mut features, &grad_features);
        if !config.freeze_decoder {
            opt_decoder[0].step(&mut decoder.w1, &d_dec.w1);
            opt_decoder[1].step(&mut decoder.b1, &d_dec.b1);
            opt_decoder[2].step(&mut decoder.w2, &d_dec.w2);
            opt_decoder[3].step(&mut decoder.b2, &d_dec.b2);
        }
        trace.push(FieldLoss { iteration, frame_id: view.frame.frame_id, ce, color: color_loss });
    }

    for (g, (f, row)) in scene.iter_mut().zip(features.chunks(d_f).zip(geometry.chunks(GEOMETRY_PARAMS))) {
        g.feature.copy_from_slice(f);
        apply_geometry_row(g, row);
    }
    Ok(TrainedField { scene, decoder, loss_trace: trace })
}
