//! Generate a corrupted synthetic tabletop scene and write it to disk.
//!
//! cargo run --release --example synth_scene -- [OUT_DIR]

use semfield::synth::{consistency_score, generate, CorruptionSpec, SceneSpec};

fn main() -> semfield::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("semfield-synth"), Into::into);
    let spec = SceneSpec {
        corruption: CorruptionSpec { occlusion_rate: 0.3, blur_mix: 0.3, view_rot_deg: 20.0, ..CorruptionSpec::clean() },
        ..SceneSpec::default()
    };
    let scene = generate(&spec)?;

    println!("{} Gaussians, {} training frames", scene.gaussians.len(), scene.dataset.frames.len());
    println!("phrases: {:?}", scene.queries.phrases);
    for layer in &scene.dataset.layers {
        let features: Vec<Vec<f64>> = layer.features.iter().map(|f| f.vector.clone()).collect();
        // Category of each mask, read back from the ground-truth view.
        let categories: Vec<usize> = layer
            .masks
            .iter()
            .map(|m| {
                let view = scene.ground_truth.view(m.frame_id).unwrap();
                let grid = view.label_grid().unwrap();
                let bm = m.bitmap().unwrap();
                let first = bm.ones().next().unwrap();
                grid[first].unwrap_or(0) as usize
            })
            .collect();
        let (within, across) = consistency_score(&features, &categories)?;
        println!(
            "layer {:<8} {:>4} masks, mean cosine within category {within:.3}, across {across:.3}",
            layer.tag.as_str(),
            layer.masks.len()
        );
    }

    scene.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
