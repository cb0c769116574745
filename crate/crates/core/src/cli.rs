//! Command-line front end: one subcommand per pipeline stage.
//!
//! Stage artifacts live under `<work>/<stage>-<key>/`, where `key` is the
//! stage key of the resolved configuration, so artifacts of incompatible
//! configurations never mix. Explicitly requested stages are always
//! recomputed; upstream stages are reused when a complete, stamped
//! directory for the current key exists and computed otherwise.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::ccl::{read_index_maps, write_index_maps, IndexMap};
use crate::error::{Error, Result};
use crate::evalkit::{
    codebook_purity, evaluate, heat_color, pair_iou, run_ablation, slug, write_figures, write_report, EvalInputs,
    Variant,
};
use crate::field::{write_loss_trace, Decoder, FieldMode};
use crate::pipeline::{
    associate, build_index_maps, train_codebooks, train_fields, PerScale, PipelineConfig, ScaleField, SemanticModel,
    Stage,
};
use crate::query::{segment, select_and_edit, EditOp, RelevanceMode};
use crate::splat::{load_scene, render, save_scene, Gaussian};
use crate::store::{load_dataset, load_frame_images, save_dataset, write_records, CameraPose, Codebook, Dataset, QuerySet, Scale};
use crate::synth::{generate, GroundTruth, GROUND_TRUTH, QUERIES, SCENE};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "SEMFIELD_THREADS";
const SNAPSHOT: &str = "config.toml";
const STAMP: &str = "stage.json";

#[derive(Debug, Parser)]
#[command(name = "semfield", version, about = "Open-vocabulary semantic fields over 3D Gaussian scenes")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON by extension). Defaults to the
    /// snapshot stored next to the data, then to built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and dataset into the data directory.
    Synth(SynthArgs),
    /// Merge, filter and label masks against the propagated masks.
    Associate,
    /// Learn one prototype codebook per mask scale.
    TrainCodebook,
    /// Build per-pixel prototype index maps.
    Index,
    /// Optimize the per-scale semantic fields.
    TrainField,
    /// Render trained fields (or any scene checkpoint) from dataset views.
    Render(RenderArgs),
    /// Relevance heatmaps of a phrase.
    Query(QueryArgs),
    /// Binary segmentation masks of a phrase.
    Segment(SegmentArgs),
    /// Select the Gaussians matching a phrase and edit them.
    Edit(EditArgs),
    /// Score held-out views against the ground truth.
    Eval(OutArgs),
    /// Run the loss ablation end to end.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of object categories.
    #[arg(long)]
    k: Option<usize>,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
    /// Number of held-out views.
    #[arg(long)]
    eval_views: Option<usize>,
    /// Sets both the global and the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Fraction of masks cut by a random half-plane.
    #[arg(long)]
    occlusion: Option<f64>,
    /// Mixing weight toward another category.
    #[arg(long)]
    blur: Option<f64>,
    /// Per-view feature rotation, degrees.
    #[arg(long)]
    view_rot: Option<f64>,
    /// Erosion radius (pixels) of the propagated masks.
    #[arg(long)]
    erosion: Option<usize>,
}

#[derive(Debug, Args)]
struct ViewArgs {
    /// Frame ids to use; defaults to the held-out views, or every frame
    /// when there are none.
    #[arg(long = "view", value_name = "ID")]
    views: Vec<u32>,
    /// Output directory (default: a subdirectory of the report directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Sp,
    Wp,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Sp => Scale::Sp,
            ScaleArg::Wp => Scale::Wp,
        }
    }
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    views: ViewArgs,
    /// Field scale to render.
    #[arg(long, value_enum, default_value = "wp")]
    scale: ScaleArg,
    /// Render this scene checkpoint (e.g. an edited scene) instead.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    phrase: String,
    #[command(flatten)]
    views: ViewArgs,
    /// Use the raw softmax relevance instead of the calibrated one.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    phrase: String,
    #[command(flatten)]
    views: ViewArgs,
    /// Relevance threshold (default: from the configuration).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OpArg {
    Extract,
    Delete,
    Recolor,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    phrase: String,
    #[arg(long, value_enum)]
    op: OpArg,
    /// RGB in [0, 1] for `recolor`.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 0.0, 0.0])]
    color: Vec<f64>,
    #[command(flatten)]
    views: ViewArgs,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory (default: the report directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Variants to run.
    #[arg(long, value_delimiter = ',', default_value = "BASELINE,PULL_ONLY,PUSH_ONLY,FULL")]
    variants: Vec<Variant>,
    /// Run the variants concurrently.
    #[arg(long)]
    parallel: bool,
    /// Output directory (default: `<report>/ablation`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors (nothing written),
/// 1 on stage failures, with a JSON error record on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let mut config = resolve_config(cli.config.as_deref())?;
    if let Command::Synth(args) = &cli.command {
        return synth(config, args);
    }
    // The data on disk fixes the scene, including any `synth` flag overrides.
    let snapshot = Path::new(&config.paths.data).join(SNAPSHOT);
    if cli.config.is_some() && snapshot.exists() {
        let generated = PipelineConfig::load(&snapshot)?;
        config.seed = generated.seed;
        config.synth = generated.synth;
    }
    let ws = Workspace::new(config);
    ws.check_data()?;
    match cli.command {
        Command::Synth(_) => unreachable!(),
        Command::Associate => ws.associated(true).map(drop),
        Command::TrainCodebook => ws.codebooks(true).map(drop),
        Command::Index => ws.index_maps(true).map(drop),
        Command::TrainField => ws.fields(true).map(drop),
        Command::Render(a) => ws.render(&a),
        Command::Query(a) => ws.query(&a),
        Command::Segment(a) => ws.segment(&a),
        Command::Edit(a) => ws.edit(&a),
        Command::Eval(a) => ws.eval(&a),
        Command::Ablate(a) => ws.ablate(&a),
    }
}

fn resolve_config(explicit: Option<&Path>) -> Result<PipelineConfig> {
    if let Some(path) = explicit {
        return PipelineConfig::load(path);
    }
    let snapshot = Path::new(&PipelineConfig::default().paths.data).join(SNAPSHOT);
    if snapshot.exists() {
        return PipelineConfig::load(&snapshot);
    }
    Ok(PipelineConfig::default())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageStamp {
    stage: Stage,
    key: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

fn read_stamp(dir: &Path) -> Result<Option<StageStamp>> {
    let path = dir.join(STAMP);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))
}

/// Replaces `dir` with an empty directory.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn snapshot(dir: &Path, config: &PipelineConfig) -> Result<()> {
    write_text(&dir.join(SNAPSHOT), &config.to_toml())
}

fn synth(mut config: PipelineConfig, a: &SynthArgs) -> Result<()> {
    let s = &mut config.synth;
    let c = &mut s.corruption;
    s.num_categories = a.k.unwrap_or(s.num_categories);
    s.n_views = a.views.unwrap_or(s.n_views);
    s.n_eval_views = a.eval_views.unwrap_or(s.n_eval_views);
    s.width = a.width.unwrap_or(s.width);
    s.height = a.height.unwrap_or(s.height);
    c.occlusion_rate = a.occlusion.unwrap_or(c.occlusion_rate);
    c.blur_mix = a.blur.unwrap_or(c.blur_mix);
    c.view_rot_deg = a.view_rot.unwrap_or(c.view_rot_deg);
    c.propagation_erosion = a.erosion.unwrap_or(c.propagation_erosion);
    if let Some(seed) = a.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    config.validate()?;
    let scene = generate(&config.synth)?;
    let dir = PathBuf::from(&config.paths.data);
    fresh_dir(&dir)?;
    scene.save(&dir)?;
    snapshot(&dir, &config)?;
    write_json(&dir.join(STAMP), &StageStamp { stage: Stage::Synth, key: config.stage_key(Stage::Synth) })?;
    println!(
        "synth: {} categories, {} + {} views, {} Gaussians -> {}",
        config.synth.num_categories,
        config.synth.n_views,
        config.synth.n_eval_views,
        scene.gaussians.len(),
        dir.display()
    );
    Ok(())
}

/// A camera the CLI can render from.
struct View {
    frame_id: u32,
    camera: CameraPose,
    width: usize,
    height: usize,
    truth: Option<(usize, Vec<Bitmap>)>,
}

fn palette(j: usize) -> [u8; 3] {
    let h = (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 16) as u8 | 0x30, (h >> 32) as u8 | 0x30, (h >> 48) as u8 | 0x30]
}

fn to_rgb8(rgb: &[f64]) -> Vec<u8> {
    rgb.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn save_rgb(path: &Path, px: &[u8], w: usize, h: usize) -> Result<()> {
    image::save_buffer(path, px, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

fn save_gray(path: &Path, px: &[u8], w: usize, h: usize) -> Result<()> {
    image::save_buffer(path, px, w as u32, h as u32, image::ColorType::L8)?;
    Ok(())
}

struct Workspace {
    config: PipelineConfig,
    data: PathBuf,
    work: PathBuf,
    report: PathBuf,
}

impl Workspace {
    fn new(config: PipelineConfig) -> Self {
        let p = &config.paths;
        let (data, work, report) = (p.data.clone().into(), p.work.clone().into(), p.report.clone().into());
        Self { config, data, work, report }
    }

    /// Generated data carries a stamp; it must match the configuration.
    /// Externally produced datasets have none and are taken as they are.
    fn check_data(&self) -> Result<()> {
        if let Some(stamp) = read_stamp(&self.data)? {
            let key = self.config.stage_key(Stage::Synth);
            if stamp.key != key {
                return Err(Error::SchemaViolation(format!(
                    "{} was generated with a different configuration (key {}, expected {key}); re-run `synth` or pass its --config",
                    self.data.display(),
                    stamp.key
                )));
            }
        }
        Ok(())
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        let name = match stage {
            Stage::Synth => "synth",
            Stage::Associate => "associate",
            Stage::TrainCodebook => "codebook",
            Stage::Index => "index",
            Stage::TrainField => "field",
            Stage::Query => "query",
        };
        let key = self.config.stage_key(stage);
        self.work.join(format!("{name}-{}", &key[..16]))
    }

    /// Whether `dir` holds a complete run of `stage` for the current key.
    fn is_complete(&self, dir: &Path, stage: Stage) -> Result<bool> {
        Ok(read_stamp(dir)?.is_some_and(|s| s.stage == stage && s.key == self.config.stage_key(stage)))
    }

    fn finish(&self, dir: &Path, stage: Stage) -> Result<()> {
        snapshot(dir, &self.config)?;
        write_json(&dir.join(STAMP), &StageStamp { stage, key: self.config.stage_key(stage) })?;
        println!("{}: {}", serde_json::to_value(stage).unwrap().as_str().unwrap(), dir.display());
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.data)
    }

    fn queries(&self) -> Result<QuerySet> {
        QuerySet::load(&self.data.join(QUERIES))
    }

    fn ground_truth(&self) -> Result<Option<GroundTruth>> {
        let path = self.data.join(GROUND_TRUTH);
        path.exists().then(|| GroundTruth::load(&path)).transpose()
    }

    fn require_ground_truth(&self) -> Result<GroundTruth> {
        self.ground_truth()?
            .ok_or_else(|| Error::MissingArtifact(format!("{} (evaluation needs ground truth)", self.data.join(GROUND_TRUTH).display())))
    }

    fn images(&self, dataset: &Dataset) -> Result<Option<Vec<Vec<u8>>>> {
        match self.config.field.mode {
            FieldMode::Joint => load_frame_images(dataset, &self.data).map(Some),
            FieldMode::SemanticOnly => Ok(None),
        }
    }

    fn associated(&self, force: bool) -> Result<Dataset> {
        let dir = self.stage_dir(Stage::Associate);
        if force || !self.is_complete(&dir, Stage::Associate)? {
            let out = associate(&self.dataset()?, &self.config.masks)?;
            fresh_dir(&dir)?;
            save_dataset(&out, &dir)?;
            self.finish(&dir, Stage::Associate)?;
        }
        load_dataset(&dir)
    }

    fn codebooks(&self, force: bool) -> Result<PerScale<Codebook>> {
        let dir = self.stage_dir(Stage::TrainCodebook);
        if force || !self.is_complete(&dir, Stage::TrainCodebook)? {
            let associated = self.associated(false)?;
            let trained = train_codebooks(&associated, &self.config.effective_ccl())?;
            fresh_dir(&dir)?;
            for s in [Scale::Sp, Scale::Wp] {
                let t = trained.get(s);
                t.codebook.save(&dir.join(format!("{s}.bin")))?;
                let mut w = csv::Writer::from_path(dir.join(format!("loss_{s}.csv")))
                    .map_err(|e| Error::SchemaViolation(e.to_string()))?;
                for row in &t.loss_trace {
                    w.serialize(row).map_err(|e| Error::SchemaViolation(e.to_string()))?;
                }
                w.flush().map_err(|e| Error::io(&dir, e))?;
            }
            self.finish(&dir, Stage::TrainCodebook)?;
        }
        PerScale::try_build(|s| Codebook::load(&dir.join(format!("{s}.bin"))))
    }

    fn index_maps(&self, force: bool) -> Result<PerScale<Vec<IndexMap>>> {
        let dir = self.stage_dir(Stage::Index);
        if force || !self.is_complete(&dir, Stage::Index)? {
            let associated = self.associated(false)?;
            let maps = build_index_maps(&associated, &self.codebooks(false)?)?;
            fresh_dir(&dir)?;
            for s in [Scale::Sp, Scale::Wp] {
                write_index_maps(&dir.join(format!("{s}.bin")), maps.get(s))?;
            }
            self.finish(&dir, Stage::Index)?;
        }
        PerScale::try_build(|s| read_index_maps(&dir.join(format!("{s}.bin"))))
    }

    fn fields(&self, force: bool) -> Result<PerScale<ScaleField>> {
        let dir = self.stage_dir(Stage::TrainField);
        if force || !self.is_complete(&dir, Stage::TrainField)? {
            let associated = self.associated(false)?;
            let codebooks = self.codebooks(false)?;
            let maps = self.index_maps(false)?;
            let gaussians = load_scene(&self.data.join(SCENE))?;
            let images = self.images(&associated)?;
            let trained = train_fields(
                &gaussians,
                &associated,
                &maps,
                &codebooks,
                images.as_deref(),
                &self.config.effective_field(),
            )?;
            fresh_dir(&dir)?;
            for s in [Scale::Sp, Scale::Wp] {
                let sub = dir.join(s.as_str());
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                let t = trained.get(s);
                save_scene(&t.scene, &sub.join(SCENE))?;
                t.decoder.save(&sub.join("decoder.json"))?;
                write_loss_trace(&sub.join("loss.csv"), &t.loss_trace)?;
            }
            self.finish(&dir, Stage::TrainField)?;
        }
        PerScale::try_build(|s| {
            let sub = dir.join(s.as_str());
            Ok(ScaleField { scene: load_scene(&sub.join(SCENE))?, decoder: Decoder::load(&sub.join("decoder.json"))? })
        })
    }

    fn model(&self) -> Result<SemanticModel> {
        Ok(SemanticModel { codebooks: self.codebooks(false)?, fields: self.fields(false)? })
    }

    /// Cameras selected by `--view`: training frames plus held-out views of
    /// the ground truth, if any.
    fn views(&self, ids: &[u32]) -> Result<Vec<View>> {
        let dataset = self.dataset()?;
        let gt = self.ground_truth()?;
        let mut all: Vec<(bool, View)> = Vec::new();
        for f in &dataset.frames {
            all.push((false, View { frame_id: f.frame_id, camera: f.camera.clone(), width: f.width, height: f.height, truth: None }));
        }
        if let Some(gt) = &gt {
            for v in &gt.views {
                let truth = (1..=gt.num_categories).map(|k| v.category_mask(k)).collect::<Result<Vec<_>>>()?;
                let (width, height) = v.dims();
                let entry = View { frame_id: v.frame_id, camera: v.camera()?, width, height, truth: Some((gt.num_categories, truth)) };
                match all.iter_mut().find(|(_, e)| e.frame_id == v.frame_id) {
                    Some(slot) => slot.1 = entry,
                    None => all.push((v.held_out, entry)),
                }
            }
        }
        if !ids.is_empty() {
            return ids
                .iter()
                .map(|id| {
                    let i = all
                        .iter()
                        .position(|(_, v)| v.frame_id == *id)
                        .ok_or_else(|| Error::MissingArtifact(format!("view {id}")))?;
                    Ok(all.swap_remove(i).1)
                })
                .collect();
        }
        let any_held_out = all.iter().any(|(h, _)| *h);
        Ok(all.into_iter().filter(|(h, _)| *h == any_held_out).map(|(_, v)| v).collect())
    }

    fn known_phrase(&self, phrase: &str) -> Result<QuerySet> {
        let queries = self.queries()?;
        if queries.position(phrase).is_none() {
            return Err(Error::InvalidConfig(format!("query `{phrase}` is not in {}", self.data.join(QUERIES).display())));
        }
        Ok(queries)
    }

    fn out_dir(&self, explicit: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let dir = explicit.clone().unwrap_or_else(|| self.report.join(default));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        snapshot(&dir, &self.config)?;
        Ok(dir)
    }

    fn render(&self, a: &RenderArgs) -> Result<()> {
        let views = self.views(&a.views.views)?;
        let scale: Scale = a.scale.into();
        let (scene, decoder) = match &a.scene {
            Some(path) => (load_scene(path)?, None),
            None => {
                let f = self.fields(false)?.get(scale).clone();
                (f.scene, Some(f.decoder))
            }
        };
        let dir = self.out_dir(&a.views.out, "render")?;
        for v in &views {
            let out = render(&scene, &v.camera, v.width, v.height)?;
            let stem = format!("frame_{:04}", v.frame_id);
            save_rgb(&dir.join(format!("{stem}_rgb.png")), &to_rgb8(&out.color), v.width, v.height)?;
            let weight: Vec<u8> = out.blend_weight_sum.iter().map(|w| (w.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            save_gray(&dir.join(format!("{stem}_weight.png")), &weight, v.width, v.height)?;
            // Raw semantic features, one f32 row per pixel.
            if out.feature_dim > 0 {
                let rows: Vec<Vec<f32>> =
                    out.feature.chunks(out.feature_dim).map(|px| px.iter().map(|&x| x as f32).collect()).collect();
                write_records(&dir.join(format!("{stem}_feature_{scale}.bin")), out.feature_dim, &rows)?;
            }
            if let Some(decoder) = &decoder {
                let decoded = crate::field::decode(&out.feature, decoder)?;
                let px: Vec<u8> = decoded.argmax().into_iter().flat_map(palette).collect();
                save_rgb(&dir.join(format!("{stem}_category_{scale}.png")), &px, v.width, v.height)?;
            }
        }
        println!("render: {} views -> {}", views.len(), dir.display());
        Ok(())
    }

    fn query(&self, a: &QueryArgs) -> Result<()> {
        let queries = self.known_phrase(&a.phrase)?;
        let model = self.model()?;
        let mode = if a.raw { RelevanceMode::Raw } else { self.config.query.relevance };
        let views = self.views(&a.views.views)?;
        let dir = self.out_dir(&a.views.out, &format!("query/{}", slug(&a.phrase)))?;
        for v in &views {
            let grids = model.grids(&v.camera, v.width, v.height)?;
            let maps = model.relevance(&grids, v.width, v.height, &a.phrase, &queries, mode)?;
            let fused: Vec<f64> = maps.sp.grid.iter().zip(&maps.wp.grid).map(|(x, y)| x.max(*y)).collect();
            for (name, grid) in [("sp", &maps.sp.grid), ("wp", &maps.wp.grid), ("max", &fused)] {
                let px: Vec<u8> = grid.iter().flat_map(|&r| heat_color(r)).collect();
                save_rgb(&dir.join(format!("frame_{:04}_{name}.png", v.frame_id)), &px, v.width, v.height)?;
            }
        }
        println!("query `{}`: {} views -> {}", a.phrase, views.len(), dir.display());
        Ok(())
    }

    fn segment(&self, a: &SegmentArgs) -> Result<()> {
        let queries = self.known_phrase(&a.phrase)?;
        let model = self.model()?;
        let threshold = a.threshold.unwrap_or(self.config.query.threshold);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
        }
        let views = self.views(&a.views.views)?;
        let dir = self.out_dir(&a.views.out, &format!("segment/{}", slug(&a.phrase)))?;
        let category = queries.position(&a.phrase);
        for v in &views {
            let grids = model.grids(&v.camera, v.width, v.height)?;
            let maps = model.relevance(&grids, v.width, v.height, &a.phrase, &queries, self.config.query.relevance)?;
            let mask = segment(&[&maps.sp, &maps.wp], threshold)?;
            let stem = format!("frame_{:04}", v.frame_id);
            let bits: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            save_gray(&dir.join(format!("{stem}_mask.png")), &bits, v.width, v.height)?;
            let rgb = to_rgb8(&render(&model.fields.wp.scene, &v.camera, v.width, v.height)?.color);
            let over: Vec<u8> = rgb
                .chunks(3)
                .zip(mask.bits())
                .flat_map(|(c, &m)| if m { [c[0] / 2, c[1] / 2 + 127, c[2] / 2] } else { [c[0] / 2, c[1] / 2, c[2] / 2] })
                .collect();
            save_rgb(&dir.join(format!("{stem}_overlay.png")), &over, v.width, v.height)?;
            // Phrases of ground-truth objects are scored when the view has truth.
            if let (Some((k, truth)), Some(c)) = (&v.truth, category) {
                if c < *k {
                    println!("frame {}: IoU {:.4}", v.frame_id, pair_iou(&mask, &truth[c])?);
                }
            }
        }
        println!("segment `{}`: {} views -> {}", a.phrase, views.len(), dir.display());
        Ok(())
    }

    fn edit(&self, a: &EditArgs) -> Result<()> {
        let op = match a.op {
            OpArg::Extract => EditOp::Extract,
            OpArg::Delete => EditOp::Delete,
            OpArg::Recolor => EditOp::Recolor([a.color[0], a.color[1], a.color[2]]),
        };
        let queries = self.known_phrase(&a.phrase)?;
        let model = self.model()?;
        let scale = self.config.query.edit_scale;
        let field = model.fields.get(scale);
        let op_name = format!("{:?}", a.op).to_lowercase();
        let dir = self.out_dir(&a.views.out, &format!("edit/{}-{op_name}", slug(&a.phrase)))?;
        let result = select_and_edit(
            &field.scene,
            &field.decoder,
            model.codebooks.get(scale),
            &a.phrase,
            &queries,
            op,
            self.config.query.relevance,
            self.config.query.threshold,
        );
        let (edited, selection): (Vec<Gaussian>, _) = match result {
            Ok(r) => r,
            Err(e @ Error::EmptySelection(_)) => {
                // Reported, not fatal: the scene is left as it is.
                eprintln!("{}", serde_json::json!({ "warning": e.kind(), "message": e.to_string() }));
                write_json(&dir.join("selection.json"), &serde_json::json!({ "query": a.phrase, "indices": [] }))?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        write_json(&dir.join("selection.json"), &selection)?;
        save_scene(&edited, &dir.join(SCENE))?;
        for v in self.views(&a.views.views)? {
            let out = render(&edited, &v.camera, v.width, v.height)?;
            save_rgb(&dir.join(format!("frame_{:04}.png", v.frame_id)), &to_rgb8(&out.color), v.width, v.height)?;
        }
        println!(
            "edit `{}` ({op_name}): {} of {} Gaussians selected -> {}",
            a.phrase,
            selection.indices.len(),
            field.scene.len(),
            dir.display()
        );
        Ok(())
    }

    fn eval(&self, a: &OutArgs) -> Result<()> {
        let gt = self.require_ground_truth()?;
        let queries = self.queries()?;
        let model = self.model()?;
        let mut report = evaluate(&model, &gt, &queries, &self.config)?;
        report.purity = Some(codebook_purity(&self.associated(false)?, &model.codebooks)?);
        let dir = self.out_dir(&a.out, "")?;
        write_report(&dir, std::slice::from_ref(&report))?;
        write_figures(&dir, &model, &gt, &queries, &self.config, self.config.query.relevance)?;
        println!("eval: mIoU {:.4} over {} queries -> {}", report.miou, report.per_query.len(), dir.display());
        Ok(())
    }

    fn ablate(&self, a: &AblateArgs) -> Result<()> {
        let gt = self.require_ground_truth()?;
        let queries = self.queries()?;
        let dataset = self.dataset()?;
        let gaussians = load_scene(&self.data.join(SCENE))?;
        let images = self.images(&dataset)?;
        let inputs =
            EvalInputs { dataset: &dataset, gaussians: &gaussians, images: images.as_deref(), ground_truth: &gt, queries: &queries };
        let reports = run_ablation(inputs, &self.config, &a.variants, a.parallel)?;
        let dir = self.out_dir(&a.out, "ablation")?;
        write_report(&dir, &reports)?;
        for r in &reports {
            println!("{:<10} mIoU {:.4}", r.variant.map_or("-", Variant::as_str), r.miou);
        }
        println!("ablate: -> {}", dir.display());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for cmd in [
            "synth", "associate", "train-codebook", "index", "train-field", "render", "query", "segment", "edit", "eval",
            "ablate",
        ] {
            let e = Cli::try_parse_from(["semfield", cmd, "--help"]).unwrap_err();
            assert_eq!(e.kind(), clap::error::ErrorKind::DisplayHelp, "{cmd}");
            assert_eq!(e.exit_code(), 0);
        }
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["semfield", "synth", "--no-such-flag"]), 2);
        assert_eq!(run(["semfield", "frobnicate"]), 2);
        assert_eq!(run(["semfield", "edit", "--phrase", "x"]), 2);
    }

    #[test]
    fn synth_flags_override_the_config() {
        let cli = Cli::try_parse_from(["semfield", "--threads", "2", "synth", "--k", "3", "--seed", "9", "--blur", "0.2"]).unwrap();
        assert_eq!(cli.threads, 2);
        let Command::Synth(a) = cli.command else { panic!() };
        assert_eq!((a.k, a.seed, a.blur), (Some(3), Some(9), Some(0.2)));
    }

    #[test]
    fn ablate_variants_parse() {
        let cli = Cli::try_parse_from(["semfield", "ablate", "--variants", "baseline,FULL"]).unwrap();
        let Command::Ablate(a) = cli.command else { panic!() };
        assert_eq!(a.variants, vec![Variant::Baseline, Variant::Full]);
    }
}
