//! Feature-space and mask-space corruption models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::ccl::{cosine, dot, norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Fraction of masks cut by a random half-plane.
    pub occlusion_rate: f64,
    /// Weight `λ` of the mix `(1-λ)u + λw` toward another category `w`.
    pub blur_mix: f64,
    /// Per-view rotation angle (degrees) of every feature toward a shared
    /// per-view direction.
    pub view_rot_deg: f64,
    /// Erosion radius (pixels) applied to the oracle tracker's masks.
    pub propagation_erosion: usize,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        Self {
            occlusion_rate: 0.0,
            blur_mix: 0.0,
            view_rot_deg: 0.0,
            propagation_erosion: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.occlusion_rate) || !unit(self.blur_mix) {
            return Err(Error::InvalidConfig("corruption rates must lie in [0, 1]".into()));
        }
        if !self.view_rot_deg.is_finite() || self.view_rot_deg < 0.0 || self.view_rot_deg > 90.0 {
            return Err(Error::InvalidConfig("view_rot_deg must lie in [0, 90]".into()));
        }
        Ok(())
    }
}

/// Deterministic per-stream seed derived from a base seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` unit vectors with pairwise cosine in `[0, 0.5)`.
///
/// Vectors share a common direction with weight 0.5 before normalization,
/// so that every pairwise cosine is non-negative (embedding spaces of
/// contrastive image-text models are strongly anisotropic); candidates
/// are rejected until the bound holds.
pub fn category_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let shared = random_unit(rng, dim);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::GenerationFailure(format!(
                "cannot draw {count} category vectors with pairwise cosine in [0, 0.5) at d = {dim}"
            )));
        }
        let r = random_unit(rng, dim);
        let v: Vec<f64> = shared.iter().zip(&r).map(|(s, x)| 0.5 * s + x).collect();
        let n = norm(&v);
        let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
        if out.iter().all(|u| {
            let c = cosine(u, &v);
            (0.0..0.5).contains(&c)
        }) {
            out.push(v);
        }
    }
    Ok(out)
}

/// `normalize((1 - λ) u + λ w)`.
pub fn blur_toward(u: &[f64], w: &[f64], lambda: f64) -> Vec<f64> {
    let v: Vec<f64> = u.iter().zip(w).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Rotates unit `f` by `angle` radians inside the plane spanned by `f` and
/// `direction`. Returns `f` unchanged if the two are parallel.
pub fn rotate_toward(f: &[f64], direction: &[f64], angle: f64) -> Vec<f64> {
    let along = dot(direction, f);
    let perp: Vec<f64> = direction.iter().zip(f).map(|(r, x)| r - along * x).collect();
    let pn = norm(&perp);
    if pn < 1e-12 || angle == 0.0 {
        return f.to_vec();
    }
    let (s, c) = angle.sin_cos();
    f.iter().zip(&perp).map(|(x, p)| c * x + s * p / pn).collect()
}

/// Keeps the part of `region` on one side of a random line. The cut sits at
/// a random quantile in `[0.25, 0.75]` of the pixels projected on a random
/// direction, so roughly that fraction survives. Returns the kept region
/// (never empty for a non-empty input).
pub fn truncate_half_plane(region: &Bitmap, rng: &mut ChaCha8Rng) -> Bitmap {
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    let quantile = rng.random_range(0.25..0.75);
    let (nx, ny) = (theta.cos(), theta.sin());
    let w = region.width();
    let mut proj: Vec<(f64, usize)> = region
        .ones()
        .map(|i| (((i % w) as f64) * nx + ((i / w) as f64) * ny, i))
        .collect();
    if proj.is_empty() {
        return region.clone();
    }
    proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((proj.len() as f64 * quantile).round() as usize).clamp(1, proj.len());
    let mut out = Bitmap::new(region.width(), region.height());
    for &(_, i) in &proj[..keep] {
        out.set_index(i, true);
    }
    out
}

/// Applies blur then view rotation to a clean category vector.
pub fn corrupt_feature(
    clean: &[f64],
    other: &[f64],
    view_direction: &[f64],
    spec: &CorruptionSpec,
) -> Vec<f64> {
    let blurred = if spec.blur_mix > 0.0 {
        blur_toward(clean, other, spec.blur_mix)
    } else {
        clean.to_vec()
    };
    if spec.view_rot_deg > 0.0 {
        rotate_toward(&blurred, view_direction, spec.view_rot_deg.to_radians())
    } else {
        blurred
    }
}

/// Labelled embeddings drawn from the corruption model without rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    /// Association labels (1-based; -1 where the mask was cut too much).
    pub labels: Vec<i32>,
    /// Ground-truth 0-based category of each feature.
    pub categories: Vec<usize>,
    pub category_vectors: Vec<Vec<f64>>,
}

/// `per_category` features for each of `k` categories, spread over
/// `n_views` pseudo-views. Occluded features keep a random fraction in
/// `[0.25, 0.75]` of their area, and lose their label when that fraction
/// (their IoU with the tracked mask) does not exceed 0.5.
pub fn labeled_features(
    k: usize,
    per_category: usize,
    n_views: usize,
    dim: usize,
    spec: &CorruptionSpec,
) -> Result<FeatureSet> {
    spec.validate()?;
    if k < 2 || n_views == 0 {
        return Err(Error::GenerationFailure("need k >= 2 and at least one view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1, 0));
    let cats = category_vectors(k, dim, &mut rng)?;
    let view_dirs: Vec<Vec<f64>> = (0..n_views)
        .map(|v| random_unit(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2, v as u64)), dim))
        .collect();
    let mut set = FeatureSet {
        features: Vec::new(),
        labels: Vec::new(),
        categories: Vec::new(),
        category_vectors: cats.clone(),
    };
    for c in 0..k {
        for i in 0..per_category {
            let view = i % n_views;
            let mut other = rng.random_range(0..k - 1);
            if other >= c {
                other += 1;
            }
            let f = corrupt_feature(&cats[c], &cats[other], &view_dirs[view], spec);
            let occluded = rng.random::<f64>() < spec.occlusion_rate;
            let kept = rng.random_range(0.25..0.75);
            let label = if occluded && kept <= 0.5 { -1 } else { c as i32 + 1 };
            set.features.push(f);
            set.labels.push(label);
            set.categories.push(c);
        }
    }
    Ok(set)
}
