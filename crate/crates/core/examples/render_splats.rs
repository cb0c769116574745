//! Render a Gaussian scene and check coverage against the silhouettes.
//!
//! cargo run --release --example render_splats -- [OUT.png]

use semfield::splat::render;
use semfield::synth::{generate, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("semfield-render.png"), Into::into);
    let scene = generate(&SceneSpec { width: 128, height: 128, ..SceneSpec::default() })?;
    let view = scene.ground_truth.held_out_views().next().unwrap();
    let (w, h) = view.dims();

    let t = std::time::Instant::now();
    let frame = render(&scene.gaussians, &view.camera()?, w, h)?;
    println!("{w}x{h} in {:.1} ms, {} contributions", t.elapsed().as_secs_f64() * 1e3, frame.state.num_contributions());

    for k in 1..=scene.ground_truth.num_categories {
        let mask = view.category_mask(k)?;
        if mask.is_empty() {
            continue;
        }
        let mean = mask.ones().map(|p| frame.blend_weight_sum[p]).sum::<f64>() / mask.count() as f64;
        println!("{:<12} mean coverage {mean:.3} over {} px", scene.ground_truth.phrases[k - 1], mask.count());
    }

    let rgb: Vec<u8> = frame.color.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(&out, &rgb, w as u32, h as u32, image::ColorType::Rgb8)?;
    println!("wrote {}", out.display());
    Ok(())
}
