//! Select the Gaussians of a queried object and delete them.

use semfield::pipeline::{run_pipeline, PipelineConfig};
use semfield::query::{select_and_edit, EditOp};
use semfield::splat::render;
use semfield::synth::generate;

fn main() -> semfield::Result<()> {
    let mut config = PipelineConfig::default();
    config.ccl.steps = 300;
    config.field.iterations = 600;
    let scene = generate(&config.synth)?;
    let run = run_pipeline(&scene.dataset, &scene.gaussians, Some(&scene.images), &config)?;
    let model = run.model();
    let s = config.query.edit_scale;
    let field = model.fields.get(s);

    let phrase = &scene.ground_truth.phrases[0];
    let (edited, selection) = select_and_edit(
        &field.scene,
        &field.decoder,
        model.codebooks.get(s),
        phrase,
        &scene.queries,
        EditOp::Delete,
        config.query.relevance,
        config.query.threshold,
    )?;
    let truth = scene.ground_truth.gaussian_category.iter().filter(|&&c| c == 1).count();
    let hits = selection.indices.iter().filter(|&&i| scene.ground_truth.gaussian_category[i] == 1).count();
    println!("`{phrase}`: {} Gaussians selected, {hits} of {truth} belong to the object", selection.indices.len());

    let view = scene.ground_truth.held_out_views().next().unwrap();
    let (w, h) = view.dims();
    let mask = view.category_mask(1)?;
    let coverage = |g: &[semfield::splat::Gaussian]| -> semfield::Result<f64> {
        let out = render(g, &view.camera()?, w, h)?;
        Ok(mask.ones().map(|p| out.blend_weight_sum[p]).sum::<f64>() / mask.count().max(1) as f64)
    };
    println!("mean coverage inside the silhouette: before {:.3}, after {:.3}", coverage(&field.scene)?, coverage(&edited)?);
    Ok(())
}
