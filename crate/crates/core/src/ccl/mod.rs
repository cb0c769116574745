//! Contrastive codebook learning.
//!
//! Every embedding is matched to its most similar prototype by cosine
//! similarity. Three losses shape the prototype table:
//!
//! - matching: `1 - cos(F_i, T_j*)` over every feature in the batch
//! - pull: `1 - cos(T_ji, T_jk)` over same-label pairs
//! - push: `max(0, cos(T_ji, T_jk) - m)` over different-label pairs
//!
//! Features labelled [`UNMATCHED`] only take part in the matching loss.
//! Each term is the mean over its contributing features or pairs, and pairs
//! are all unordered pairs within the batch.

mod index_map;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Codebook, UNMATCHED};

pub use index_map::{build_index_map, read_index_maps, write_index_maps, IndexMap, UNASSIGNED};
pub use train::{
    assignment_purity, init_codebook, train_codebook, train_step, CodebookTrainer, TrainedCodebook,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeInit {
    /// D²-weighted seeding from the feature set (cosine distance).
    KmeansPlusPlus,
    /// Isotropic Gaussian directions.
    RandomUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CclConfig {
    pub lambda_pull: f64,
    pub lambda_push: f64,
    pub margin: f64,
    pub n_prototypes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub init: PrototypeInit,
    pub seed: u64,
}

impl Default for CclConfig {
    fn default() -> Self {
        Self {
            lambda_pull: 0.25,
            lambda_push: 0.25,
            margin: 0.7,
            n_prototypes: 128,
            steps: 1000,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            init: PrototypeInit::RandomUnit,
            seed: 0,
        }
    }
}

impl CclConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("ccl: {msg}")));
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return bad("margin must lie in (0, 1)");
        }
        if self.lambda_pull < 0.0 || self.lambda_push < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.n_prototypes < 2 {
            return bad("need at least 2 prototypes");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Features, their association labels, and (once matched) their prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i32>,
    pub assignments: Vec<usize>,
}

impl LabeledFeatureBatch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<i32>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset("empty feature batch".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::ShapeError(format!(
                "{} features, {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            assignments: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Recomputes every `assignments[i]` with [`nearest_prototype`].
    pub fn assign(&mut self, codebook: &Codebook) -> Result<()> {
        self.assignments = self
            .features
            .iter()
            .map(|f| nearest_prototype(f, codebook).map(|(j, _)| j))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn check_assigned(&self, codebook: &Codebook) {
        assert_eq!(self.assignments.len(), self.features.len(), "batch assignments not populated");
        debug_assert!(self.assignments.iter().all(|&j| j < codebook.n_prototypes()));
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Adds `scale * d cos(a, b) / d a` into `out`.
fn add_cosine_grad(out: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_term = c / (na * na);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bi * inv - self_term * ai);
    }
}

/// Index and cosine of the most similar prototype (lowest index on ties).
pub fn nearest_prototype(feature: &[f64], codebook: &Codebook) -> Result<(usize, f64)> {
    if feature.len() != codebook.dim {
        return Err(Error::ShapeError(format!(
            "feature width {} vs codebook width {}",
            feature.len(),
            codebook.dim
        )));
    }
    let nf = norm(feature);
    if !nf.is_finite() || nf == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, row) in codebook.prototypes.iter().enumerate() {
        let c = dot(feature, row) / (nf * norm(row));
        if c > best.1 {
            best = (j, c);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub max: f64,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
}

/// Pair counts keyed by unordered prototype pair `(a, b)` with `a <= b`.
struct PairCounts {
    pull: BTreeMap<(usize, usize), u64>,
    push: BTreeMap<(usize, usize), u64>,
    n_pull: u64,
    n_push: u64,
}

fn pair_counts(batch: &LabeledFeatureBatch) -> PairCounts {
    // counts[label][prototype]
    let mut per_label: BTreeMap<i32, BTreeMap<usize, u64>> = BTreeMap::new();
    for (&y, &j) in batch.labels.iter().zip(&batch.assignments) {
        if y != UNMATCHED {
            *per_label.entry(y).or_default().entry(j).or_default() += 1;
        }
    }
    let key = |a: usize, b: usize| if a <= b { (a, b) } else { (b, a) };
    let mut pull = BTreeMap::new();
    let mut push = BTreeMap::new();
    let (mut n_pull, mut n_push) = (0u64, 0u64);
    let labels: Vec<_> = per_label.values().collect();
    for (li, counts) in labels.iter().enumerate() {
        let entries: Vec<_> = counts.iter().collect();
        for (x, (&a, &na)) in entries.iter().enumerate() {
            let same = na * (na - 1) / 2;
            if same > 0 {
                *pull.entry((a, a)).or_default() += same;
                n_pull += same;
            }
            for (&b, &nb) in &entries[x + 1..] {
                *pull.entry(key(a, b)).or_default() += na * nb;
                n_pull += na * nb;
            }
        }
        for other in &labels[li + 1..] {
            for (&a, &na) in counts.iter() {
                for (&b, &nb) in other.iter() {
                    *push.entry(key(a, b)).or_default() += na * nb;
                    n_push += na * nb;
                }
            }
        }
    }
    PairCounts {
        pull,
        push,
        n_pull,
        n_push,
    }
}

pub fn loss_max(batch: &LabeledFeatureBatch, codebook: &Codebook) -> f64 {
    batch.check_assigned(codebook);
    let sum: f64 = batch
        .features
        .iter()
        .zip(&batch.assignments)
        .map(|(f, &j)| 1.0 - cosine(f, codebook.row(j)))
        .sum();
    sum / batch.len() as f64
}

pub fn loss_pull(batch: &LabeledFeatureBatch, codebook: &Codebook) -> f64 {
    batch.check_assigned(codebook);
    let pc = pair_counts(batch);
    if pc.n_pull == 0 {
        return 0.0;
    }
    let sum: f64 = pc
        .pull
        .iter()
        .filter(|((a, b), _)| a != b)
        .map(|(&(a, b), &n)| n as f64 * (1.0 - cosine(codebook.row(a), codebook.row(b))))
        .sum();
    sum / pc.n_pull as f64
}

pub fn loss_push(batch: &LabeledFeatureBatch, codebook: &Codebook, margin: f64) -> f64 {
    batch.check_assigned(codebook);
    let pc = pair_counts(batch);
    if pc.n_push == 0 {
        return 0.0;
    }
    let sum: f64 = pc
        .push
        .iter()
        .map(|(&(a, b), &n)| {
            let c = if a == b { 1.0 } else { cosine(codebook.row(a), codebook.row(b)) };
            n as f64 * (c - margin).max(0.0)
        })
        .sum();
    sum / pc.n_push as f64
}

pub fn total_loss(batch: &LabeledFeatureBatch, codebook: &Codebook, config: &CclConfig) -> f64 {
    loss_terms(batch, codebook, config).total
}

pub fn loss_terms(batch: &LabeledFeatureBatch, codebook: &Codebook, config: &CclConfig) -> LossTerms {
    let max = loss_max(batch, codebook);
    let pull = loss_pull(batch, codebook);
    let push = loss_push(batch, codebook, config.margin);
    LossTerms {
        max,
        pull,
        push,
        total: max + config.lambda_pull * pull + config.lambda_push * push,
    }
}

/// Loss terms and the gradient of the total loss with respect to every
/// prototype row, with assignments held fixed. Features are constants.
pub fn loss_and_grad(
    batch: &LabeledFeatureBatch,
    codebook: &Codebook,
    config: &CclConfig,
) -> (LossTerms, Vec<Vec<f64>>) {
    batch.check_assigned(codebook);
    let d = codebook.dim;
    let mut grad = vec![vec![0.0; d]; codebook.n_prototypes()];
    let b = batch.len() as f64;

    let mut max = 0.0;
    for (f, &j) in batch.features.iter().zip(&batch.assignments) {
        let t = codebook.row(j);
        max += 1.0 - cosine(f, t);
        add_cosine_grad(&mut grad[j], t, f, -1.0 / b);
    }
    max /= b;

    let pc = pair_counts(batch);
    let mut pull = 0.0;
    if pc.n_pull > 0 {
        let w = config.lambda_pull / pc.n_pull as f64;
        for (&(a, c), &n) in pc.pull.iter().filter(|((a, c), _)| a != c) {
            let (ta, tc) = (codebook.row(a), codebook.row(c));
            pull += n as f64 * (1.0 - cosine(ta, tc));
            add_cosine_grad(&mut grad[a], ta, tc, -w * n as f64);
            add_cosine_grad(&mut grad[c], tc, ta, -w * n as f64);
        }
        pull /= pc.n_pull as f64;
    }

    let mut push = 0.0;
    if pc.n_push > 0 {
        let w = config.lambda_push / pc.n_push as f64;
        for (&(a, c), &n) in &pc.push {
            if a == c {
                push += n as f64 * (1.0 - config.margin).max(0.0);
                continue;
            }
            let (ta, tc) = (codebook.row(a), codebook.row(c));
            let cos = cosine(ta, tc);
            if cos > config.margin {
                push += n as f64 * (cos - config.margin);
                add_cosine_grad(&mut grad[a], ta, tc, w * n as f64);
                add_cosine_grad(&mut grad[c], tc, ta, w * n as f64);
            }
        }
        push /= pc.n_push as f64;
    }

    let terms = LossTerms {
        max,
        pull,
        push,
        total: max + config.lambda_pull * pull + config.lambda_push * push,
    };
    (terms, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn batch(features: Vec<Vec<f64>>, labels: Vec<i32>, assignments: Vec<usize>) -> LabeledFeatureBatch {
        LabeledFeatureBatch {
            features,
            labels,
            assignments,
        }
    }

    #[test]
    fn nearest_identity_and_direct_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::new((0..8).map(|_| random_unit(&mut rng, 6)).collect()).unwrap();
        let (j, c) = nearest_prototype(cb.row(5), &cb).unwrap();
        assert_eq!(j, 5);
        assert!((c - 1.0).abs() < 1e-12);

        let cb = Codebook::new(vec![vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let (j, c) = nearest_prototype(&[1.0, 0.0], &cb).unwrap();
        assert_eq!(j, 0);
        assert!((c - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nearest_rejects_zero() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(nearest_prototype(&[0.0, 0.0], &cb), Err(Error::DegenerateFeature)));
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::new((0..64).map(|_| random_unit(&mut rng, 16)).collect()).unwrap();
        for _ in 0..200 {
            let f = random_unit(&mut rng, 16);
            let mut best = 0;
            for j in 1..64 {
                if cosine(&f, cb.row(j)) > cosine(&f, cb.row(best)) {
                    best = j;
                }
            }
            assert_eq!(nearest_prototype(&f, &cb).unwrap().0, best);
            let scaled: Vec<f64> = f.iter().map(|x| x * 7.5).collect();
            assert_eq!(nearest_prototype(&scaled, &cb).unwrap().0, best);
        }
    }

    #[test]
    fn loss_max_cases() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 2.0]], vec![1, -1], vec![0, 1]);
        assert_eq!(loss_max(&b, &cb), 0.0);
        let b = batch(vec![vec![0.0, 1.0]], vec![1], vec![0]);
        assert!((loss_max(&b, &cb) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pull_cases() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]]).unwrap();
        let f = vec![1.0, 0.0];
        // same prototype for same label: zero
        let b = batch(vec![f.clone(), f.clone()], vec![2, 2], vec![1, 1]);
        assert_eq!(loss_pull(&b, &cb), 0.0);
        // no shared labels: empty pair set
        let b = batch(vec![f.clone(), f.clone()], vec![1, 2], vec![0, 1]);
        assert_eq!(loss_pull(&b, &cb), 0.0);
        // cos = 0.5
        let b = batch(vec![f.clone(), f], vec![3, 3], vec![0, 1]);
        assert!((loss_pull(&b, &cb) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn push_cases() {
        let cb = Codebook::new(vec![vec![1.0, 0.0], vec![0.9, 0.19f64.sqrt()], vec![0.6, 0.8]]).unwrap();
        let f = vec![1.0, 0.0];
        let b = batch(vec![f.clone(), f.clone()], vec![1, 2], vec![0, 1]);
        assert!((loss_push(&b, &cb, 0.7) - 0.2).abs() < 1e-12);
        let b = batch(vec![f.clone(), f], vec![1, 2], vec![0, 2]);
        assert_eq!(loss_push(&b, &cb, 0.7), 0.0);
    }

    #[test]
    fn unmatched_rows_do_not_change_pair_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = Codebook::new((0..10).map(|_| random_unit(&mut rng, 5)).collect()).unwrap();
        let n = 30;
        let features: Vec<_> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
        let labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..4)).map(|y| if y == 0 { -1 } else { y }).collect();
        let mut full = LabeledFeatureBatch::new(features.clone(), labels.clone()).unwrap();
        full.assign(&cb).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&i| labels[i] != -1).collect();
        let mut filtered = LabeledFeatureBatch::new(
            keep.iter().map(|&i| features[i].clone()).collect(),
            keep.iter().map(|&i| labels[i]).collect(),
        )
        .unwrap();
        filtered.assign(&cb).unwrap();
        assert_eq!(loss_push(&full, &cb, 0.3), loss_push(&filtered, &cb, 0.3));
        assert_eq!(loss_pull(&full, &cb), loss_pull(&filtered, &cb));
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::new((0..6).map(|_| random_unit(&mut rng, 4)).collect()).unwrap();
        let mut b = LabeledFeatureBatch::new(
            (0..12).map(|_| random_unit(&mut rng, 4)).collect(),
            (0..12).map(|i| (i % 3) as i32 + 1).collect(),
        )
        .unwrap();
        b.assign(&cb).unwrap();
        let cfg = CclConfig { margin: 0.1, ..Default::default() };
        let t = loss_terms(&b, &cb, &cfg);
        assert_eq!(t.total, t.max + 0.25 * t.pull + 0.25 * t.push);
        let zero = CclConfig { lambda_pull: 0.0, lambda_push: 0.0, ..cfg };
        assert_eq!(total_loss(&b, &cb, &zero), loss_max(&b, &cb));
        let (terms, _) = loss_and_grad(&b, &cb, &cfg);
        assert!((terms.total - t.total).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let cfg = CclConfig::default();
        let total = 0.4 + cfg.lambda_pull * 0.2 + cfg.lambda_push * 0.2;
        assert!((total - 0.5).abs() < 1e-15);
    }
}
