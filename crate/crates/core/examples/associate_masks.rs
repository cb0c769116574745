//! Merge, filter and label per-frame masks against tracked category masks.

use semfield::pipeline::{associate, MaskConfig};
use semfield::store::{Scale, UNMATCHED};
use semfield::synth::{generate, CorruptionSpec, SceneSpec};

fn main() -> semfield::Result<()> {
    let corruption = CorruptionSpec { occlusion_rate: 0.3, propagation_erosion: 1, ..CorruptionSpec::clean() };
    let scene = generate(&SceneSpec { corruption, ..SceneSpec::default() })?;
    let associated = associate(&scene.dataset, &MaskConfig::default())?;

    for s in [Scale::Sp, Scale::Wp] {
        let layer = associated.layer(s.into()).unwrap();
        let unmatched = layer.masks.iter().filter(|m| m.label == UNMATCHED).count();
        println!("{s}: {} masks kept, {unmatched} unmatched", layer.masks.len());
        let frame = associated.frames[0].frame_id;
        for (m, _) in layer.frame_masks(frame) {
            println!("  frame {frame} mask {:>3}: area {:>4} label {:>2}", m.mask_id, m.region.area(), m.label);
        }
    }
    Ok(())
}
