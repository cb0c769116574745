//! Open-vocabulary querying: relevance maps over a phrase set, thresholded
//! segmentation, and direct selection and editing of Gaussians.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::ccl::cosine;
use crate::error::{Error, Result};
use crate::field::{decode, Decoder};
use crate::splat::Gaussian;
use crate::store::{Codebook, QuerySet, Scale};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How per-pixel query probabilities are turned into segmentation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    /// The softmax probability `p(τ|v)` itself.
    Raw,
    /// `p` rescaled so that chance level maps to 0 and the phrase's own
    /// embedding maps to 1, clamped to `[0, 1]`.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub phrase: String,
    pub scale: Option<Scale>,
    pub width: usize,
    pub height: usize,
    pub grid: Vec<f64>,
}

/// `p(s|f)` for every phrase `s`: softmax over the cosines between `f` and
/// each phrase embedding.
pub fn query_distribution(feature: &[f64], queries: &QuerySet) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut p: Vec<f64> = queries.embeddings.iter().map(|e| cosine(feature, e)).collect();
    crate::field::softmax_in_place(&mut p);
    Ok(p)
}

fn phrase_index(phrase: &str, queries: &QuerySet) -> Result<usize> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    queries
        .position(phrase)
        .ok_or_else(|| Error::InvalidConfig(format!("query `{phrase}` is not in the query set")))
}

/// Rescales `p` against chance (`1/|T|`) and the phrase's self-relevance.
/// With a single phrase, or when the phrase is no more relevant to itself
/// than chance, every score is 1.
pub fn calibrate(p: f64, self_relevance: f64, n_queries: usize) -> f64 {
    let chance = 1.0 / n_queries as f64;
    let span = self_relevance - chance;
    if n_queries <= 1 || span <= 0.0 {
        return 1.0;
    }
    ((p - chance) / span).clamp(0.0, 1.0)
}

/// Relevance of `phrase`'s own embedding to itself within `queries`.
pub fn self_relevance(phrase: &str, queries: &QuerySet) -> Result<f64> {
    let t = phrase_index(phrase, queries)?;
    Ok(query_distribution(&queries.embeddings[t], queries)?[t])
}

/// Per-pixel relevance of `phrase` for refined features `refined`
/// (`width * height` rows).
pub fn relevance_map(
    refined: &[f64],
    width: usize,
    height: usize,
    phrase: &str,
    queries: &QuerySet,
    mode: RelevanceMode,
) -> Result<RelevanceMap> {
    let t = phrase_index(phrase, queries)?;
    let n = width * height;
    if n == 0 || refined.len() % n != 0 {
        return Err(Error::ShapeError(format!("{} values for a {width}x{height} grid", refined.len())));
    }
    let d = refined.len() / n;
    let anchor = match mode {
        RelevanceMode::Raw => None,
        RelevanceMode::Calibrated => Some(self_relevance(phrase, queries)?),
    };
    let grid = refined
        .par_chunks(d)
        .map(|f| {
            let p = query_distribution(f, queries)?[t];
            Ok(anchor.map_or(p, |a| calibrate(p, a, queries.len())))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RelevanceMap { phrase: phrase.into(), scale: None, width, height, grid })
}

/// Relevance of every codebook prototype to `phrase`; pixels whose refined
/// feature is prototype `j` get entry `j`.
pub fn prototype_relevance(codebook: &Codebook, phrase: &str, queries: &QuerySet, mode: RelevanceMode) -> Result<Vec<f64>> {
    let flat: Vec<f64> = codebook.prototypes.concat();
    Ok(relevance_map(&flat, codebook.n_prototypes(), 1, phrase, queries, mode)?.grid)
}

/// Per-pixel maximum over the maps, compared against `threshold`.
pub fn segment(maps: &[&RelevanceMap], threshold: f64) -> Result<Bitmap> {
    let first = maps.first().ok_or_else(|| Error::ShapeError("no relevance maps to segment".into()))?;
    let (w, h) = (first.width, first.height);
    if maps.iter().any(|m| m.width != w || m.height != h || m.grid.len() != w * h) {
        return Err(Error::ShapeError("relevance maps differ in size".into()));
    }
    Ok(Bitmap::from_fn(w, h, |x, y| {
        let i = y * w + x;
        maps.iter().map(|m| m.grid[i]).fold(f64::NEG_INFINITY, f64::max) >= threshold
    }))
}

/// Decoder output for every Gaussian's own feature, without rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClasses {
    pub n_categories: usize,
    /// `n_gaussians * n_categories` softmax rows.
    pub probs: Vec<f64>,
    pub category: Vec<usize>,
    pub confidence: Vec<f64>,
}

pub fn classify_gaussians(scene: &[Gaussian], decoder: &Decoder, codebook: &Codebook) -> Result<GaussianClasses> {
    if decoder.n_out != codebook.n_prototypes() {
        return Err(Error::ShapeError(format!(
            "decoder has {} outputs, codebook {} prototypes",
            decoder.n_out,
            codebook.n_prototypes()
        )));
    }
    let flat: Vec<f64> = scene.iter().flat_map(|g| g.feature.iter().copied()).collect();
    if scene.iter().any(|g| g.feature.len() != decoder.d_in) {
        return Err(Error::ShapeError(format!("Gaussian features are not {} wide", decoder.d_in)));
    }
    let decoded = decode(&flat, decoder)?;
    let category = decoded.argmax();
    let confidence = category.iter().enumerate().map(|(i, &c)| decoded.probs_row(i)[c]).collect();
    Ok(GaussianClasses { n_categories: decoder.n_out, probs: decoded.probs, category, confidence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSelection {
    pub query: String,
    /// Codebook categories whose relevance passed the threshold.
    pub prototypes: Vec<usize>,
    /// Selected Gaussians, ascending.
    pub indices: Vec<usize>,
    pub categories: Vec<usize>,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Extract,
    Delete,
    Recolor([f64; 3]),
}

/// Gaussians whose decoded category is a prototype relevant to `phrase`.
pub fn select_gaussians(
    scene: &[Gaussian],
    decoder: &Decoder,
    codebook: &Codebook,
    phrase: &str,
    queries: &QuerySet,
    mode: RelevanceMode,
    threshold: f64,
) -> Result<GaussianSelection> {
    let relevance = prototype_relevance(codebook, phrase, queries, mode)?;
    let prototypes: Vec<usize> = (0..relevance.len()).filter(|&j| relevance[j] >= threshold).collect();
    if prototypes.is_empty() {
        return Err(Error::EmptySelection(phrase.into()));
    }
    let classes = classify_gaussians(scene, decoder, codebook)?;
    let indices: Vec<usize> = (0..scene.len()).filter(|&i| prototypes.contains(&classes.category[i])).collect();
    Ok(GaussianSelection {
        query: phrase.into(),
        categories: indices.iter().map(|&i| classes.category[i]).collect(),
        confidences: indices.iter().map(|&i| classes.confidence[i]).collect(),
        prototypes,
        indices,
    })
}

/// Applies `op` to the selected Gaussians; everything else is copied
/// unchanged.
pub fn apply_edit(scene: &[Gaussian], selection: &GaussianSelection, op: EditOp) -> Result<Vec<Gaussian>> {
    let mut selected = vec![false; scene.len()];
    for &i in &selection.indices {
        *selected
            .get_mut(i)
            .ok_or_else(|| Error::ShapeError(format!("selection index {i} outside a scene of {}", scene.len())))? = true;
    }
    Ok(match op {
        EditOp::Extract => scene.iter().zip(&selected).filter(|(_, &s)| s).map(|(g, _)| g.clone()).collect(),
        EditOp::Delete => scene.iter().zip(&selected).filter(|(_, &s)| !s).map(|(g, _)| g.clone()).collect(),
        EditOp::Recolor(c) => scene
            .iter()
            .zip(&selected)
            .map(|(g, &s)| if s { Gaussian { color: c, ..g.clone() } } else { g.clone() })
            .collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn select_and_edit(
    scene: &[Gaussian],
    decoder: &Decoder,
    codebook: &Codebook,
    phrase: &str,
    queries: &QuerySet,
    op: EditOp,
    mode: RelevanceMode,
    threshold: f64,
) -> Result<(Vec<Gaussian>, GaussianSelection)> {
    let selection = select_gaussians(scene, decoder, codebook, phrase, queries, mode, threshold)?;
    Ok((apply_edit(scene, &selection, op)?, selection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn queries(n: usize, seed: u64) -> QuerySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QuerySet::new((0..n).map(|i| format!("q{i}")).collect(), (0..n).map(|_| unit(&mut rng, 6)).collect()).unwrap()
    }

    #[test]
    fn single_phrase_is_certain() {
        let q = queries(1, 0);
        let m = relevance_map(&[0.3; 12], 2, 1, "q0", &q, RelevanceMode::Raw).unwrap();
        assert_eq!(m.grid, vec![1.0, 1.0]);
        let c = relevance_map(&[0.3; 12], 2, 1, "q0", &q, RelevanceMode::Calibrated).unwrap();
        assert_eq!(c.grid, vec![1.0, 1.0]);
    }

    #[test]
    fn equal_cosines_split_evenly() {
        let q = QuerySet::new(vec!["a".into(), "b".into()], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = relevance_map(&[1.0, 1.0], 1, 1, "a", &q, RelevanceMode::Raw).unwrap();
        assert!((m.grid[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relevance_matches_scalar_softmax_oracle() {
        let q = queries(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f64> = (0..4 * 6).map(|_| rng.sample(StandardNormal)).collect();
        for (t, phrase) in q.phrases.iter().enumerate() {
            let m = relevance_map(&f, 2, 2, phrase, &q, RelevanceMode::Raw).unwrap();
            for (px, &p) in f.chunks(6).zip(&m.grid) {
                let cos = |e: &[f64]| {
                    let dot: f64 = px.iter().zip(e).map(|(a, b)| a * b).sum();
                    dot / px.iter().map(|x| x * x).sum::<f64>().sqrt()
                };
                let denom: f64 = q.embeddings.iter().map(|e| cos(e).exp()).sum();
                assert!((p - cos(&q.embeddings[t]).exp() / denom).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_query_set_is_reported() {
        let q = QuerySet::new(vec![], vec![]).unwrap();
        assert!(matches!(relevance_map(&[1.0], 1, 1, "x", &q, RelevanceMode::Raw), Err(Error::EmptyQuerySet)));
    }

    #[test]
    fn calibrated_self_relevance_is_one() {
        let q = queries(4, 3);
        let m = relevance_map(&q.embeddings[2], 1, 1, "q2", &q, RelevanceMode::Calibrated).unwrap();
        assert_eq!(m.grid[0], 1.0);
        assert_eq!(calibrate(0.25, 0.4, 4), 0.0);
    }

    #[test]
    fn constant_maps_segment_trivially() {
        let full = RelevanceMap { phrase: "a".into(), scale: None, width: 3, height: 2, grid: vec![1.0; 6] };
        let empty = RelevanceMap { grid: vec![0.0; 6], ..full.clone() };
        assert_eq!(segment(&[&full], 0.5).unwrap().count(), 6);
        assert_eq!(segment(&[&empty], 0.5).unwrap().count(), 0);
        assert_eq!(segment(&[&empty, &full], 0.5).unwrap().count(), 6);
    }

    fn tiny_scene(n: usize, d: usize, seed: u64) -> Vec<Gaussian> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                Gaussian::isotropic(
                    Vector3::new(i as f64, 0.0, 3.0),
                    0.1,
                    0.5,
                    [0.1, 0.2, 0.3],
                    (0..d).map(|_| rng.sample(StandardNormal)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_decoder_classifies_uniformly() {
        let cb = Codebook::new(vec![vec![1.0, 0.0]; 4]).unwrap();
        let c = classify_gaussians(&tiny_scene(5, 3, 0), &Decoder::zeros(3, 4, 4), &cb).unwrap();
        assert!(c.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(c.category.iter().all(|&k| k == 0));
    }

    #[test]
    fn batch_classification_matches_per_gaussian_loop() {
        let cb = Codebook::new(vec![vec![1.0, 0.0]; 5]).unwrap();
        let dec = Decoder::new(3, 8, 5, 4);
        let scene = tiny_scene(7, 3, 1);
        let batch = classify_gaussians(&scene, &dec, &cb).unwrap();
        for (i, g) in scene.iter().enumerate() {
            let one = classify_gaussians(std::slice::from_ref(g), &dec, &cb).unwrap();
            assert_eq!(one.category[0], batch.category[i]);
            assert_eq!(one.probs[..], batch.probs[i * 5..(i + 1) * 5]);
        }
    }

    /// Two prototypes equal to the two phrase embeddings; a decoder that
    /// routes the sign of feature 0 to prototype 0 or 1.
    fn editable() -> (Vec<Gaussian>, Decoder, Codebook, QuerySet) {
        let q = QuerySet::new(vec!["a".into(), "b".into()], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cb = Codebook::new(q.embeddings.clone()).unwrap();
        let mut dec = Decoder::zeros(1, 2, 2);
        dec.w1 = vec![1.0, -1.0];
        dec.w2 = vec![10.0, 0.0, 0.0, 10.0];
        let mut scene = tiny_scene(6, 1, 2);
        for (i, g) in scene.iter_mut().enumerate() {
            g.feature = vec![if i % 3 == 0 { 1.0 } else { -1.0 }];
        }
        (scene, dec, cb, q)
    }

    #[test]
    fn extract_and_delete_partition_the_scene() {
        let (scene, dec, cb, q) = editable();
        let sel = select_gaussians(&scene, &dec, &cb, "a", &q, RelevanceMode::Calibrated, 0.5).unwrap();
        assert_eq!(sel.indices, vec![0, 3]);
        let kept = apply_edit(&scene, &sel, EditOp::Extract).unwrap();
        let rest = apply_edit(&scene, &sel, EditOp::Delete).unwrap();
        assert_eq!(kept.len() + rest.len(), scene.len());
        assert!(kept.iter().all(|g| !rest.contains(g)));
    }

    #[test]
    fn recolor_touches_only_color_of_selected() {
        let (scene, dec, cb, q) = editable();
        let (edited, sel) =
            select_and_edit(&scene, &dec, &cb, "b", &q, EditOp::Recolor([1.0, 0.0, 0.0]), RelevanceMode::Calibrated, 0.5)
                .unwrap();
        for (i, (a, b)) in scene.iter().zip(&edited).enumerate() {
            if sel.indices.contains(&i) {
                assert_eq!(b.color, [1.0, 0.0, 0.0]);
                assert_eq!(Gaussian { color: a.color, ..b.clone() }, *a);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn irrelevant_codebook_gives_empty_selection() {
        let (scene, dec, _, q) = editable();
        let cb = Codebook::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = select_gaussians(&scene, &dec, &cb, "a", &q, RelevanceMode::Calibrated, 0.5);
        assert!(matches!(r, Err(Error::EmptySelection(_))));
    }

    proptest! {
        #[test]
        fn relevance_rows_are_distributions(seed: u64) {
            let q = queries(5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let f: Vec<f64> = (0..3 * 6).map(|_| rng.sample(StandardNormal)).collect();
            let maps: Vec<RelevanceMap> =
                q.phrases.iter().map(|p| relevance_map(&f, 3, 1, p, &q, RelevanceMode::Raw).unwrap()).collect();
            for i in 0..3 {
                let s: f64 = maps.iter().map(|m| m.grid[i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn raising_threshold_never_grows_mask(grid in proptest::collection::vec(0.0f64..1.0, 12), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = RelevanceMap { phrase: "x".into(), scale: None, width: 4, height: 3, grid };
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(segment(&[&m], hi).unwrap().is_subset_of(&segment(&[&m], lo).unwrap()));
        }

        #[test]
        fn query_order_only_permutes_outputs(seed: u64) {
            let q = queries(4, seed);
            let rev = QuerySet::new(q.phrases.iter().rev().cloned().collect(), q.embeddings.iter().rev().cloned().collect()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let f: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            for p in &q.phrases {
                for mode in [RelevanceMode::Raw, RelevanceMode::Calibrated] {
                    let a = relevance_map(&f, 1, 1, p, &q, mode).unwrap().grid[0];
                    let b = relevance_map(&f, 1, 1, p, &rev, mode).unwrap().grid[0];
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn segmentation_matches_comparison_oracle(grid in proptest::collection::vec(0.0f64..1.0, 12), t in 0.0f64..1.0) {
            let m = RelevanceMap { phrase: "x".into(), scale: None, width: 4, height: 3, grid: grid.clone() };
            let mask = segment(&[&m], t).unwrap();
            for (i, &g) in grid.iter().enumerate() {
                prop_assert_eq!(mask.get_index(i), g >= t);
            }
        }
    }
}
