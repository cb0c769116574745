//! Loss ablation: the same scene and seeds with and without pull/push.
//!
//! cargo run --release --example ablation -- [FIELD_ITERATIONS]

use semfield::evalkit::{ablation_markdown, run_ablation, Variant};
use semfield::pipeline::PipelineConfig;
use semfield::synth::{generate, CorruptionSpec};

fn main() -> semfield::Result<()> {
    let iterations = std::env::args().nth(1).map_or(500, |s| s.parse().expect("iteration count"));
    let mut config = PipelineConfig::default();
    config.synth.corruption = CorruptionSpec { occlusion_rate: 0.3, blur_mix: 0.3, view_rot_deg: 20.0, ..CorruptionSpec::clean() };
    config.field.iterations = iterations;
    let scene = generate(&config.synth)?;
    let reports = run_ablation((&scene).into(), &config, &Variant::ALL, true)?;
    print!("{}", ablation_markdown(&reports));
    Ok(())
}
