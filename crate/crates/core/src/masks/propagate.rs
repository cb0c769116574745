use crate::error::Result;
use crate::store::PropagatedMaskSet;
use crate::synth::SyntheticScene;

/// Stand-in for a video tracker on synthetic data: ground-truth category
/// silhouettes of `frame_id`, eroded by the scene's corruption spec.
pub fn oracle_propagate(scene: &SyntheticScene, frame_id: u32) -> Result<PropagatedMaskSet> {
    scene.propagated(frame_id)
}
