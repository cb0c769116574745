//! Distill per-pixel prototype indices into the Gaussians' semantic channel.

use semfield::pipeline::{associate, build_index_maps, train_codebooks, train_fields, PipelineConfig};
use semfield::store::Scale;
use semfield::synth::generate;

fn main() -> semfield::Result<()> {
    let mut config = PipelineConfig::default();
    config.ccl.steps = 300;
    config.field.iterations = 400;
    let scene = generate(&config.synth)?;

    let associated = associate(&scene.dataset, &config.masks)?;
    let codebooks = train_codebooks(&associated, &config.effective_ccl())?.map(|_, c| c.codebook.clone());
    let maps = build_index_maps(&associated, &codebooks)?;
    let fields = train_fields(&scene.gaussians, &associated, &maps, &codebooks, Some(&scene.images), &config.effective_field())?;

    for s in [Scale::Sp, Scale::Wp] {
        let trace = &fields.get(s).loss_trace;
        let mean = |r: &[semfield::field::FieldLoss]| r.iter().map(|l| l.ce).sum::<f64>() / r.len() as f64;
        let n = trace.len().min(50);
        println!(
            "{s}: cross-entropy {:.3} over the first {n} iterations, {:.3} over the last {n}",
            mean(&trace[..n]),
            mean(&trace[trace.len() - n..])
        );
    }
    Ok(())
}
