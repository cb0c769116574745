//! Learn prototype codebooks on corrupted labelled features, with and
//! without the pull/push terms.

use semfield::ccl::{assignment_purity, nearest_prototype, train_codebook, CclConfig};
use semfield::evalkit::Variant;
use semfield::synth::{labeled_features, CorruptionSpec};

fn main() -> semfield::Result<()> {
    let spec = CorruptionSpec { occlusion_rate: 0.3, blur_mix: 0.3, view_rot_deg: 20.0, ..CorruptionSpec::clean() };
    let set = labeled_features(6, 80, 8, 512, &spec)?;
    let base = CclConfig { steps: 300, ..CclConfig::default() };

    for v in [Variant::Baseline, Variant::Full] {
        let trained = train_codebook(&set.features, &set.labels, &v.apply(&base))?;
        let assignments = set
            .features
            .iter()
            .map(|f| nearest_prototype(f, &trained.codebook).map(|(j, _)| j))
            .collect::<semfield::Result<Vec<_>>>()?;
        let used: std::collections::BTreeSet<_> = assignments.iter().collect();
        let last = trained.loss_trace.last().unwrap();
        println!(
            "{:<9} purity {:.3}, {} prototypes in use, final loss {:.4} (max {:.4} pull {:.4} push {:.4})",
            v.as_str(),
            assignment_purity(&set.labels, &assignments),
            used.len(),
            last.total,
            last.max,
            last.pull,
            last.push
        );
    }
    Ok(())
}
