use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{cosine, loss_and_grad, norm, CclConfig, LabeledFeatureBatch, LossTerms, PrototypeInit};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::store::{Codebook, UNMATCHED};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    pub loss_trace: Vec<LossTerms>,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Initial prototype table.
///
/// `KmeansPlusPlus` seeds from the features with probability proportional
/// to the squared cosine distance to the nearest chosen seed; once every
/// feature is already covered, the remaining rows fall back to random
/// directions.
pub fn init_codebook(features: &[Vec<f64>], config: &CclConfig, rng: &mut ChaCha8Rng) -> Result<Codebook> {
    let d = features.first().map(|f| f.len()).ok_or_else(|| Error::EmptyDataset("no features".into()))?;
    let n = config.n_prototypes;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    match config.init {
        PrototypeInit::RandomUnit => {
            for _ in 0..n {
                rows.push(random_unit(rng, d));
            }
        }
        PrototypeInit::KmeansPlusPlus => {
            let first = rng.random_range(0..features.len());
            rows.push(features[first].clone());
            let mut dist: Vec<f64> = features.iter().map(|f| sq_cos_dist(f, &rows[0])).collect();
            while rows.len() < n {
                let total: f64 = dist.iter().sum();
                if total <= 1e-12 {
                    rows.push(random_unit(rng, d));
                    continue;
                }
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = dist.len() - 1;
                for (i, &w) in dist.iter().enumerate() {
                    if pick < w {
                        chosen = i;
                        break;
                    }
                    pick -= w;
                }
                let row = features[chosen].clone();
                for (di, f) in dist.iter_mut().zip(features) {
                    *di = di.min(sq_cos_dist(f, &row));
                }
                rows.push(row);
            }
        }
    }
    let mut cb = Codebook::new(rows)?;
    cb.normalize_rows();
    Ok(cb)
}

fn sq_cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let d = (1.0 - cosine(a, b)).max(0.0);
    d * d
}

fn flatten(cb: &Codebook) -> Vec<f64> {
    cb.prototypes.iter().flatten().copied().collect()
}

fn unflatten(cb: &mut Codebook, flat: &[f64]) {
    for (row, chunk) in cb.prototypes.iter_mut().zip(flat.chunks_exact(cb.dim)) {
        row.copy_from_slice(chunk);
    }
}

/// One optimizer step: fresh hard assignments, analytic gradient, Adam
/// update, row re-normalization. Returns the loss at the pre-update table.
pub fn train_step(
    batch: &mut LabeledFeatureBatch,
    codebook: &mut Codebook,
    optimizer: &mut Adam,
    config: &CclConfig,
    step: usize,
) -> Result<LossTerms> {
    batch.assign(codebook)?;
    let (terms, grad) = loss_and_grad(batch, codebook, config);
    let flat_grad: Vec<f64> = grad.into_iter().flatten().collect();
    if !terms.total.is_finite() || flat_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure {
            step,
            what: "non-finite codebook gradient".into(),
        });
    }
    let mut params = flatten(codebook);
    optimizer.step(&mut params, &flat_grad);
    unflatten(codebook, &params);
    codebook.normalize_rows();
    Ok(terms)
}

/// Mini-batch training state; see [`train_codebook`].
pub struct CodebookTrainer<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [i32],
    config: CclConfig,
    rng: ChaCha8Rng,
    pub codebook: Codebook,
    optimizer: Adam,
    pub loss_trace: Vec<LossTerms>,
}

impl<'a> CodebookTrainer<'a> {
    pub fn new(features: &'a [Vec<f64>], labels: &'a [i32], config: CclConfig) -> Result<Self> {
        config.validate()?;
        if features.is_empty() {
            return Err(Error::EmptyDataset("no features to train a codebook on".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::ShapeError(format!("{} features, {} labels", features.len(), labels.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let codebook = init_codebook(features, &config, &mut rng)?;
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                betas: config.adam_betas,
                ..Default::default()
            },
            codebook.n_prototypes() * codebook.dim,
        );
        Ok(Self {
            features,
            labels,
            config,
            rng,
            codebook,
            optimizer,
            loss_trace: Vec::new(),
        })
    }

    fn next_batch(&mut self) -> Result<LabeledFeatureBatch> {
        let n = self.features.len();
        let idx: Vec<usize> = if n <= self.config.batch_size {
            (0..n).collect()
        } else {
            let mut v = sample(&mut self.rng, n, self.config.batch_size).into_vec();
            v.sort_unstable();
            v
        };
        LabeledFeatureBatch::new(
            idx.iter().map(|&i| self.features[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn step(&mut self) -> Result<LossTerms> {
        let mut batch = self.next_batch()?;
        let step = self.loss_trace.len();
        let terms = train_step(&mut batch, &mut self.codebook, &mut self.optimizer, &self.config, step)?;
        self.loss_trace.push(terms);
        Ok(terms)
    }

    pub fn finish(self) -> TrainedCodebook {
        TrainedCodebook {
            codebook: self.codebook,
            loss_trace: self.loss_trace,
        }
    }
}

/// Runs `config.steps` seeded mini-batch steps. Deterministic given the seed.
pub fn train_codebook(features: &[Vec<f64>], labels: &[i32], config: &CclConfig) -> Result<TrainedCodebook> {
    let mut trainer = CodebookTrainer::new(features, labels, *config)?;
    for _ in 0..config.steps {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

/// Fraction of labelled features that sit on their label's most common
/// prototype, pooled over labels. [`UNMATCHED`] features are ignored.
pub fn assignment_purity(labels: &[i32], assignments: &[usize]) -> f64 {
    let mut per_label: BTreeMap<i32, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&y, &j) in labels.iter().zip(assignments) {
        if y != UNMATCHED {
            *per_label.entry(y).or_default().entry(j).or_default() += 1;
        }
    }
    let total: usize = per_label.values().flat_map(|m| m.values()).sum();
    if total == 0 {
        return 0.0;
    }
    let top: usize = per_label.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    top as f64 / total as f64
}
