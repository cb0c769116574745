//! Answer text queries on held-out views and score them against the
//! ground truth.

use semfield::evalkit::{pair_iou, run_and_evaluate};
use semfield::pipeline::PipelineConfig;
use semfield::synth::generate;

fn main() -> semfield::Result<()> {
    let mut config = PipelineConfig::default();
    config.ccl.steps = 300;
    config.field.iterations = 600;
    let scene = generate(&config.synth)?;
    let (run, report) = run_and_evaluate((&scene).into(), &config, None)?;
    let model = run.model();

    let view = scene.ground_truth.held_out_views().next().unwrap();
    let (w, h) = view.dims();
    for (k, phrase) in scene.ground_truth.phrases.iter().enumerate() {
        let pred = model.segment(&view.camera()?, w, h, phrase, &scene.queries, &config.query)?;
        let iou = pair_iou(&pred, &view.category_mask(k + 1)?)?;
        println!("frame {} `{phrase}`: {} px predicted, IoU {iou:.3}", view.frame_id, pred.count());
    }
    println!("mIoU over all held-out views: {:.3}", report.miou);
    Ok(())
}
