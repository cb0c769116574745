//! Per-Gaussian semantic features decoded into codebook-category
//! distributions, trained with pixelwise cross-entropy against index maps.

mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccl::UNASSIGNED;
use crate::error::{Error, Result};
use crate::store::Codebook;

pub use train::{
    init_field_features, train_field, write_loss_trace, FieldLoss, FieldMode, FieldTrainConfig, TrainedField,
};

pub const DEFAULT_HIDDEN: usize = 64;
const DECODER_FORMAT: &str = "semfield-decoder";

/// One-hidden-layer ReLU MLP, `d_f -> hidden -> n_out`. Weight matrices
/// are row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decoder {
    pub d_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    decoder: Decoder,
}

impl Decoder {
    /// Weights and biases uniform in `±sqrt(1/fan_in)`.
    pub fn new(d_in: usize, hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, n: usize| {
            let b = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..=b)).collect::<Vec<f64>>()
        };
        let w1 = uniform(d_in, hidden * d_in);
        let b1 = uniform(d_in, hidden);
        let w2 = uniform(hidden, n_out * hidden);
        let b2 = uniform(hidden, n_out);
        Self { d_in, hidden, n_out, w1, b1, w2, b2 }
    }

    pub fn zeros(d_in: usize, hidden: usize, n_out: usize) -> Self {
        Self {
            d_in,
            hidden,
            n_out,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_out * hidden],
            b2: vec![0.0; n_out],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, n) = (self.d_in, self.hidden, self.n_out);
        if d == 0 || h == 0 || n == 0 {
            return Err(Error::ShapeError("decoder has a zero-width layer".into()));
        }
        if self.w1.len() != h * d || self.b1.len() != h || self.w2.len() != n * h || self.b2.len() != n {
            return Err(Error::ShapeError(format!("decoder tensors do not match {d}->{h}->{n}")));
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NumericalFailure { step: 0, what: "non-finite decoder weight".into() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DecoderFile { format: DECODER_FORMAT.into(), version: 1, decoder: self.clone() };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DecoderFile =
            serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))?;
        if file.format != DECODER_FORMAT || file.version != 1 {
            return Err(Error::SchemaViolation(format!("{}: not a decoder checkpoint", path.display())));
        }
        file.decoder.validate()?;
        Ok(file.decoder)
    }

    /// Backward pass for a batch decoded with [`decode`]: parameter
    /// gradients and the gradient with respect to the input rows.
    pub fn backward(&self, input: &[f64], decoded: &Decoded, d_logits: &[f64]) -> Result<(DecoderGrads, Vec<f64>)> {
        let (p, d, h, n) = (decoded.n_rows, self.d_in, self.hidden, self.n_out);
        if input.len() != p * d || d_logits.len() != p * n {
            return Err(Error::ShapeError("backward inputs do not match the decoded batch".into()));
        }
        let mut g = DecoderGrads::zeros(self);
        // dW2 = dZᵀ H, db2 = column sums of dZ
        gemm(n, p, h, d_logits, (1, n), &decoded.hidden, (h, 1), &mut g.w2, 0.0);
        column_sums(d_logits, n, &mut g.b2);
        // dH = dZ W2, masked by the ReLU
        let mut d_hidden = vec![0.0; p * h];
        gemm(p, n, h, d_logits, (n, 1), &self.w2, (h, 1), &mut d_hidden, 0.0);
        d_hidden.iter_mut().zip(&decoded.hidden).for_each(|(g, &a)| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        gemm(h, p, d, &d_hidden, (1, h), input, (d, 1), &mut g.w1, 0.0);
        column_sums(&d_hidden, h, &mut g.b1);
        let mut d_input = vec![0.0; p * d];
        gemm(p, h, d, &d_hidden, (h, 1), &self.w1, (d, 1), &mut d_input, 0.0);
        Ok((g, d_input))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderGrads {
    fn zeros(d: &Decoder) -> Self {
        Self {
            w1: vec![0.0; d.w1.len()],
            b1: vec![0.0; d.b1.len()],
            w2: vec![0.0; d.w2.len()],
            b2: vec![0.0; d.b2.len()],
        }
    }
}

/// Decoder activations for a batch of `n_rows` inputs (pixels or
/// Gaussians).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub n_rows: usize,
    pub n_out: usize,
    pub logits: Vec<f64>,
    /// Row-wise softmax of `logits`.
    pub probs: Vec<f64>,
    /// Post-ReLU hidden activations.
    hidden: Vec<f64>,
}

impl Decoded {
    pub fn probs_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_out..(i + 1) * self.n_out]
    }

    /// Per-row argmax, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.chunks(self.n_out).map(argmax).collect()
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major;
/// strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe matrices that fit inside the given slices
    // (checked by callers through their shape validation) and `c` does not
    // alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn column_sums(rows: &[f64], width: usize, out: &mut [f64]) {
    for row in rows.chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Applies the decoder to every `d_in`-wide row of `input`.
pub fn decode(input: &[f64], decoder: &Decoder) -> Result<Decoded> {
    let (d, h, n) = (decoder.d_in, decoder.hidden, decoder.n_out);
    if d == 0 || input.len() % d != 0 {
        return Err(Error::ShapeError(format!("input length {} is not a multiple of {d}", input.len())));
    }
    let p = input.len() / d;
    let mut hidden: Vec<f64> = decoder.b1.iter().copied().cycle().take(p * h).collect();
    gemm(p, d, h, input, (d, 1), &decoder.w1, (1, d), &mut hidden, 1.0);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut logits: Vec<f64> = decoder.b2.iter().copied().cycle().take(p * n).collect();
    gemm(p, h, n, &hidden, (h, 1), &decoder.w2, (1, h), &mut logits, 1.0);
    let mut probs = logits.clone();
    probs.par_chunks_mut(n).for_each(softmax_in_place);
    Ok(Decoded { n_rows: p, n_out: n, logits, probs, hidden })
}

/// Mean `-ln M(v)[target(v)]` over assigned pixels, plus its gradient with
/// respect to the logits.
pub fn ce_loss_and_grad(decoded: &Decoded, targets: &[u32]) -> Result<(f64, Vec<f64>)> {
    let n = decoded.n_out;
    if targets.len() != decoded.n_rows {
        return Err(Error::ShapeError(format!("{} targets for {} rows", targets.len(), decoded.n_rows)));
    }
    if let Some(&t) = targets.iter().find(|&&t| t != UNASSIGNED && t as usize >= n) {
        return Err(Error::ShapeError(format!("target index {t} outside {n} classes")));
    }
    let count = targets.iter().filter(|&&t| t != UNASSIGNED).count();
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; decoded.logits.len()];
    let loss: f64 = grad
        .par_chunks_mut(n)
        .zip(decoded.logits.par_chunks(n).zip(decoded.probs.par_chunks(n)))
        .zip(targets.par_iter())
        .map(|((g, (z, p)), &t)| {
            if t == UNASSIGNED {
                return 0.0;
            }
            let t = t as usize;
            for (gi, &pi) in g.iter_mut().zip(p) {
                *gi = pi * scale;
            }
            g[t] -= scale;
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[t]
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok((loss * scale, grad))
}

pub fn ce_loss(decoded: &Decoded, targets: &[u32]) -> Result<f64> {
    ce_loss_and_grad(decoded, targets).map(|(l, _)| l)
}

/// Replaces every pixel's distribution by the prototype of its argmax
/// category: `H*W*N` probabilities in, `H*W*d` features out.
pub fn refine_pixel_features(probs: &[f64], n: usize, codebook: &Codebook) -> Result<Vec<f64>> {
    if n != codebook.n_prototypes() || probs.len() % n != 0 {
        return Err(Error::ShapeError(format!(
            "distribution width {n} does not match {} prototypes",
            codebook.n_prototypes()
        )));
    }
    Ok(probs.chunks(n).flat_map(|row| codebook.row(argmax(row)).iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Scalar re-evaluation of the MLP for one row.
    fn oracle_logits(dec: &Decoder, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..dec.hidden)
            .map(|j| {
                let s: f64 = (0..dec.d_in).map(|i| dec.w1[j * dec.d_in + i] * x[i]).sum();
                (s + dec.b1[j]).max(0.0)
            })
            .collect();
        (0..dec.n_out)
            .map(|o| (0..dec.hidden).map(|j| dec.w2[o * dec.hidden + j] * h[j]).sum::<f64>() + dec.b2[o])
            .collect()
    }

    fn oracle_ce(dec: &Decoder, input: &[f64], targets: &[u32]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (x, &t) in input.chunks(dec.d_in).zip(targets) {
            if t == UNASSIGNED {
                continue;
            }
            let z = oracle_logits(dec, x);
            let sum: f64 = z.iter().map(|v| v.exp()).sum();
            total -= (z[t as usize].exp() / sum).ln();
            count += 1;
        }
        total / count as f64
    }

    fn problem(seed: u64) -> (Decoder, Vec<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(5, 7, 6, seed);
        let input = gaussian_vec(&mut rng, 9 * 5);
        let mut targets: Vec<u32> = (0..9).map(|_| rng.random_range(0..6)).collect();
        targets[2] = UNASSIGNED;
        (dec, input, targets)
    }

    fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    #[test]
    fn zero_decoder_is_uniform() {
        let dec = Decoder::zeros(4, 8, 5);
        let out = decode(&[0.3; 12], &dec).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn decode_matches_scalar_oracle_and_rows_sum_to_one() {
        let (dec, input, _) = problem(3);
        let out = decode(&input, &dec).unwrap();
        for (i, x) in input.chunks(5).enumerate() {
            let z = oracle_logits(&dec, x);
            for (a, b) in z.iter().zip(&out.logits[i * 6..(i + 1) * 6]) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((out.probs_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let dec = Decoder::zeros(4, 8, 5);
        assert!(matches!(decode(&[0.0; 7], &dec), Err(Error::ShapeError(_))));
    }

    #[test]
    fn ce_closed_forms() {
        let dec = Decoder::zeros(2, 3, 128);
        let out = decode(&[0.0; 8], &dec).unwrap();
        let l = ce_loss(&out, &[5, 7, UNASSIGNED, 127]).unwrap();
        assert!((l - 128f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&out, &[UNASSIGNED; 4]), Err(Error::EmptySupervision)));

        let mut confident = Decoder::zeros(1, 1, 3);
        confident.b2 = vec![0.0, 800.0, 0.0];
        let out = decode(&[1.0, 2.0], &confident).unwrap();
        assert_eq!(ce_loss(&out, &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn ce_matches_scalar_oracle() {
        for seed in 0..5 {
            let (dec, input, targets) = problem(seed);
            let l = ce_loss(&decode(&input, &dec).unwrap(), &targets).unwrap();
            assert!((l - oracle_ce(&dec, &input, &targets)).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_decode_gradients_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..20 {
            let (dec, input, targets) = problem(seed);
            let out = decode(&input, &dec).unwrap();
            let (_, d_logits) = ce_loss_and_grad(&out, &targets).unwrap();
            let (g, d_input) = dec.backward(&input, &out, &d_logits).unwrap();
            let loss = |dec: &Decoder, input: &[f64]| oracle_ce(dec, input, &targets);

            let mut checks: Vec<(f64, f64)> = Vec::new();
            for i in 0..input.len() {
                let (mut p, mut m) = (input.clone(), input.clone());
                p[i] += h;
                m[i] -= h;
                checks.push((d_input[i], (loss(&dec, &p) - loss(&dec, &m)) / (2.0 * h)));
            }
            let tensors: [(fn(&mut Decoder) -> &mut Vec<f64>, &Vec<f64>); 4] = [
                (|d| &mut d.w1, &g.w1),
                (|d| &mut d.b1, &g.b1),
                (|d| &mut d.w2, &g.w2),
                (|d| &mut d.b2, &g.b2),
            ];
            for (field, grad) in tensors {
                for i in 0..grad.len() {
                    let (mut p, mut m) = (dec.clone(), dec.clone());
                    field(&mut p)[i] += h;
                    field(&mut m)[i] -= h;
                    checks.push((grad[i], (loss(&p, &input) - loss(&m, &input)) / (2.0 * h)));
                }
            }
            let scale = checks.iter().map(|c| c.0.abs()).fold(0.0, f64::max);
            for (a, n) in checks {
                assert!(rel_err(a, n, 1e-3 * scale) < 1e-5, "seed {seed}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn refine_picks_argmax_prototype() {
        let cb = Codebook::new((0..8).map(|j| vec![j as f64, 1.0]).collect()).unwrap();
        let mut one_hot = vec![0.0; 8];
        one_hot[7] = 1.0;
        assert_eq!(refine_pixel_features(&one_hot, 8, &cb).unwrap(), cb.row(7));
        assert_eq!(refine_pixel_features(&[0.125; 8], 8, &cb).unwrap(), cb.row(0));
    }

    #[test]
    fn decoder_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.json");
        let dec = Decoder::new(8, 64, 128, 11);
        dec.save(&path).unwrap();
        assert_eq!(Decoder::load(&path).unwrap(), dec);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(row in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
            let mut a = row.clone();
            let mut b: Vec<f64> = row.iter().map(|v| v + c).collect();
            softmax_in_place(&mut a);
            softmax_in_place(&mut b);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn refine_matches_pixelwise_argmax(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = (0..6 * 4).map(|_| rng.random::<f64>()).collect();
            let cb = Codebook::new((0..4).map(|_| gaussian_vec(&mut rng, 3)).collect()).unwrap();
            let out = refine_pixel_features(&probs, 4, &cb).unwrap();
            for (row, f) in probs.chunks(4).zip(out.chunks(3)) {
                let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                prop_assert_eq!(f, cb.row(best));
            }
        }
    }
}
