//! Metrics and reports: IoU / mIoU over held-out views, codebook purity,
//! the four-variant loss ablation, and PNG overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::ccl::{assignment_purity, nearest_prototype, CclConfig};
use crate::error::{Error, Result};
use crate::pipeline::{labeled_features, run_pipeline, PerScale, PipelineConfig, PipelineRun, SemanticModel};
use crate::query::RelevanceMode;
use crate::splat::Gaussian;
use crate::store::{Codebook, Dataset, QuerySet};
use crate::synth::{GroundTruth, SyntheticScene};

/// IoU of one pair; two empty masks agree perfectly.
pub fn pair_iou(pred: &Bitmap, gt: &Bitmap) -> Result<f64> {
    pred.check_shape(gt)?;
    let union = pred.union_count(gt);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_count(gt) as f64 / union as f64)
}

pub fn miou(pred: &[Bitmap], gt: &[Bitmap]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeError(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::ShapeError("no mask pairs".into()));
    }
    let total = pred.iter().zip(gt).map(|(p, g)| pair_iou(p, g)).sum::<Result<f64>>()?;
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Baseline,
    PullOnly,
    PushOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::PullOnly, Variant::PushOnly, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "BASELINE",
            Variant::PullOnly => "PULL_ONLY",
            Variant::PushOnly => "PUSH_ONLY",
            Variant::Full => "FULL",
        }
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PullOnly => "baseline (w/ pull loss)",
            Variant::PushOnly => "baseline (w/ push loss)",
            Variant::Full => "full",
        }
    }

    /// The loss weights of this variant; a zero weight in `base` stays zero.
    pub fn apply(self, base: &CclConfig) -> CclConfig {
        let (pull, push) = match self {
            Variant::Baseline => (0.0, 0.0),
            Variant::PullOnly => (base.lambda_pull, 0.0),
            Variant::PushOnly => (0.0, base.lambda_push),
            Variant::Full => (base.lambda_pull, base.lambda_push),
        };
        CclConfig { lambda_pull: pull, lambda_push: push, ..*base }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub frame_id: u32,
    pub phrase: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Option<Variant>,
    pub config_hash: String,
    pub per_query: Vec<QueryScore>,
    pub miou: f64,
    /// Codebook purity of the associated features, per scale.
    pub purity: Option<PerScale<f64>>,
    /// Wall-clock seconds; kept out of the serialized report so reports
    /// stay byte-identical across runs.
    #[serde(skip)]
    pub runtime_s: f64,
}

impl EvalReport {
    /// Mean IoU per phrase, in first-seen order.
    pub fn per_phrase(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for q in &self.per_query {
            match out.iter_mut().find(|(p, _, _)| *p == q.phrase) {
                Some(e) => {
                    e.1 += q.iou;
                    e.2 += 1;
                }
                None => out.push((q.phrase.clone(), q.iou, 1)),
            }
        }
        out.into_iter().map(|(p, s, n)| (p, s / n as f64)).collect()
    }
}

pub const PROTOCOL: &str = "Each held-out view is rendered from both scale fields; every pixel takes the \
prototype of its decoded argmax category. A pixel's score for a query is the softmax relevance over the \
full query set, rescaled so that chance (1/|T|) maps to 0 and the query's own embedding maps to 1 \
(clamped to [0, 1]); the per-pixel maximum over scales is thresholded. Each (view, object query) pair \
is scored by IoU against the ground-truth silhouette (an empty prediction of an absent object scores 1); \
mIoU is the mean over all pairs.";

/// Scores `model` on every held-out view of `gt` and every object phrase.
pub fn evaluate(
    model: &SemanticModel,
    gt: &GroundTruth,
    queries: &QuerySet,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut per_query = Vec::new();
    let views: Vec<_> = gt.held_out_views().collect();
    if views.is_empty() {
        return Err(Error::EmptyDataset("ground truth has no held-out views".into()));
    }
    for view in views {
        let (w, h) = view.dims();
        let camera = view.camera()?;
        let grids = model.grids(&camera, w, h)?;
        for (k, phrase) in gt.phrases.iter().enumerate() {
            let maps = model.relevance(&grids, w, h, phrase, queries, config.query.relevance)?;
            let pred = crate::query::segment(&[&maps.sp, &maps.wp], config.query.threshold)?;
            let truth = view.category_mask(k + 1)?;
            per_query.push(QueryScore { frame_id: view.frame_id, phrase: phrase.clone(), iou: pair_iou(&pred, &truth)? });
        }
    }
    let miou = per_query.iter().map(|q| q.iou).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        variant: None,
        config_hash: config.hash(),
        per_query,
        miou,
        purity: None,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Purity of the associated features under each scale's codebook.
pub fn codebook_purity(associated: &Dataset, codebooks: &PerScale<Codebook>) -> Result<PerScale<f64>> {
    PerScale::try_build(|s| {
        let (features, labels) = labeled_features(associated, s)?;
        let cb = codebooks.get(s);
        let assignments = features.iter().map(|f| nearest_prototype(f, cb).map(|(j, _)| j)).collect::<Result<Vec<_>>>()?;
        Ok(assignment_purity(&labels, &assignments))
    })
}

/// Everything a full pipeline run plus evaluation reads.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub dataset: &'a Dataset,
    pub gaussians: &'a [Gaussian],
    pub images: Option<&'a [Vec<u8>]>,
    pub ground_truth: &'a GroundTruth,
    pub queries: &'a QuerySet,
}

impl<'a> From<&'a SyntheticScene> for EvalInputs<'a> {
    fn from(scene: &'a SyntheticScene) -> Self {
        Self {
            dataset: &scene.dataset,
            gaussians: &scene.gaussians,
            images: Some(&scene.images),
            ground_truth: &scene.ground_truth,
            queries: &scene.queries,
        }
    }
}

/// Full pipeline plus evaluation.
pub fn run_and_evaluate(inputs: EvalInputs<'_>, config: &PipelineConfig, variant: Option<Variant>) -> Result<(PipelineRun, EvalReport)> {
    let start = Instant::now();
    let run = run_pipeline(inputs.dataset, inputs.gaussians, inputs.images, config)?;
    let mut report = evaluate(&run.model(), inputs.ground_truth, inputs.queries, config)?;
    report.variant = variant;
    report.purity = Some(codebook_purity(&run.associated, &run.codebooks.map(|_, c| c.codebook.clone()))?);
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok((run, report))
}

/// Runs the pipeline once per variant with shared seeds; only the codebook
/// loss weights differ. Variants run one after another unless `parallel`.
pub fn run_ablation(inputs: EvalInputs<'_>, config: &PipelineConfig, variants: &[Variant], parallel: bool) -> Result<Vec<EvalReport>> {
    let one = |&v: &Variant| {
        let cfg = PipelineConfig { ccl: v.apply(&config.ccl), ..config.clone() };
        run_and_evaluate(inputs, &cfg, Some(v)).map(|(_, r)| r)
    };
    if parallel {
        variants.par_iter().map(one).collect()
    } else {
        variants.iter().map(one).collect()
    }
}

#[derive(Serialize)]
struct MetricRow<'a> {
    variant: &'a str,
    frame_id: u32,
    phrase: &'a str,
    iou: f64,
}

/// `metrics.csv` (one row per variant, view and query), `ablation.md`,
/// `report.json`, and the run-dependent `timing.csv`.
pub fn write_report(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::SchemaViolation(e.to_string()))?;
    for r in reports {
        let variant = r.variant.map_or("-", Variant::as_str);
        for q in &r.per_query {
            w.serialize(MetricRow { variant, frame_id: q.frame_id, phrase: &q.phrase, iou: q.iou })
                .map_err(|e| Error::SchemaViolation(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let md = dir.join("ablation.md");
    fs::write(&md, ablation_markdown(reports)).map_err(|e| Error::io(&md, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let timing = dir.join("timing.csv");
    let mut s = String::from("variant,runtime_s\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.3}", r.variant.map_or("-", Variant::as_str), r.runtime_s);
    }
    fs::write(&timing, s).map_err(|e| Error::io(&timing, e))
}

pub fn ablation_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("# Evaluation\n\n");
    let _ = writeln!(s, "Protocol: {PROTOCOL}\n");
    let phrases: Vec<String> = reports.first().map(|r| r.per_phrase().into_iter().map(|p| p.0).collect()).unwrap_or_default();
    let _ = write!(s, "| Method |");
    for p in &phrases {
        let _ = write!(s, " {p} |");
    }
    let _ = writeln!(s, " mIoU | purity SP | purity WP |");
    let _ = writeln!(s, "|---|{}---|---|---|", "---|".repeat(phrases.len()));
    for r in reports {
        let _ = write!(s, "| {} |", r.variant.map_or("run", Variant::label));
        for (_, v) in r.per_phrase() {
            let _ = write!(s, " {:.1} |", 100.0 * v);
        }
        let (sp, wp) = r.purity.as_ref().map_or((f64::NAN, f64::NAN), |p| (p.sp, p.wp));
        let _ = writeln!(s, " {:.1} | {sp:.3} | {wp:.3} |", 100.0 * r.miou);
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(s, "\nConfig hash: `{}`", r.config_hash);
    }
    s
}

/// Blue-green-red ramp over [0, 1].
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v) as u8, (255.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8, (255.0 * (1.0 - v)) as u8]
}

/// Relevance heatmaps and overlays (green: predicted, red outline: ground
/// truth) for every held-out view and object phrase.
pub fn write_figures(
    dir: &Path,
    model: &SemanticModel,
    gt: &GroundTruth,
    queries: &QuerySet,
    config: &PipelineConfig,
    mode: RelevanceMode,
) -> Result<()> {
    let heat_dir = dir.join("heatmaps");
    let over_dir = dir.join("overlays");
    for d in [&heat_dir, &over_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for view in gt.held_out_views() {
        let (w, h) = view.dims();
        let camera = view.camera()?;
        let grids = model.grids(&camera, w, h)?;
        let rgb = crate::splat::render(&model.fields.wp.scene, &camera, w, h)?.color;
        for (k, phrase) in gt.phrases.iter().enumerate() {
            let maps = model.relevance(&grids, w, h, phrase, queries, mode)?;
            let fused: Vec<f64> = maps.sp.grid.iter().zip(&maps.wp.grid).map(|(a, b)| a.max(*b)).collect();
            let pred = crate::query::segment(&[&maps.sp, &maps.wp], config.query.threshold)?;
            let truth = view.category_mask(k + 1)?;
            let edge = Bitmap::from_fn(w, h, |x, y| truth.get(x, y) && !truth.erode(1).get(x, y));
            let name = format!("frame_{:04}_{}.png", view.frame_id, slug(phrase));
            let heat_px: Vec<u8> = fused.iter().flat_map(|&v| heat_color(v)).collect();
            image::save_buffer(heat_dir.join(&name), &heat_px, w as u32, h as u32, image::ColorType::Rgb8)?;
            let over: Vec<u8> = (0..w * h)
                .flat_map(|i| {
                    let base = [rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]].map(|c| c.clamp(0.0, 1.0) * 255.0);
                    let px = if edge.get_index(i) {
                        [255.0, 0.0, 0.0]
                    } else if pred.get_index(i) {
                        [0.5 * base[0], 0.5 * base[1] + 127.0, 0.5 * base[2]]
                    } else {
                        base.map(|c| 0.6 * c)
                    };
                    px.map(|c| c as u8)
                })
                .collect();
            image::save_buffer(over_dir.join(&name), &over, w as u32, h as u32, image::ColorType::Rgb8)?;
        }
    }
    Ok(())
}

pub fn slug(phrase: &str) -> String {
    phrase.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}
