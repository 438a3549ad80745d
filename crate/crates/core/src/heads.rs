//! Distributions on top of network outputs: a categorical over code lengths
//! `1..=R_max` and a product of Bernoullis over the content bits.

use std::fmt;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;

/// Codes are stored in a single machine word.
pub const MAX_CODE_BITS: usize = 64;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `(batch, classes)` matrix.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

pub fn sigmoid_matrix(logits: ArrayView2<f64>) -> Array2<f64> {
    logits.mapv(sigmoid)
}

pub(crate) fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

pub(crate) fn in_clamp_range(p: f64) -> bool {
    (PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p)
}

/// Categorical distribution of the code length. Index `k` holds `P(L = k + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    probs: Vec<f64>,
}

impl LengthDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        LengthDistribution {
            probs: softmax(logits),
        }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.len() > MAX_CODE_BITS {
            return Err(Error::Config(format!(
                "length support must be 1..={MAX_CODE_BITS}, got {}",
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "length probabilities must form a simplex".into(),
            ));
        }
        Ok(LengthDistribution { probs })
    }

    /// Degenerate distribution pinned at `length`.
    pub fn point_mass(max_length: usize, length: usize) -> Result<Self> {
        if length == 0 || length > max_length {
            return Err(Error::Usage(format!(
                "length {length} outside 1..={max_length}"
            )));
        }
        let mut probs = vec![0.0; max_length];
        probs[length - 1] = 1.0;
        Self::from_probs(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_length(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, length: usize) -> f64 {
        self.probs[length - 1]
    }

    /// Inverse-CDF draw; returns a length in `1..=max_length`.
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        sample_categorical(&self.probs, rng.uniform()) + 1
    }

    pub fn log_prob(&self, length: usize) -> f64 {
        clamped_ln(self.prob(length))
    }

    pub fn expected_length(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| (k + 1) as f64 * p)
            .sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| ((k + 1) * (k + 1)) as f64 * p)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.expected_length();
        self.second_moment() - m * m
    }

    /// Gradient of `log_prob(length)` w.r.t. the logits.
    pub fn score(&self, length: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        if !in_clamp_range(self.prob(length)) {
            return vec![0.0; self.probs.len()];
        }
        g[length - 1] += 1.0;
        g
    }

    /// Gradient of `expected_length()` w.r.t. the logits: `p_k (k - E[L])`.
    pub fn expected_length_gradient(&self) -> Vec<f64> {
        let mean = self.expected_length();
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| p * ((k + 1) as f64 - mean))
            .collect()
    }
}

pub(crate) fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the final partial sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Content bits `z~` drawn from the product-of-Bernoulli head.
///
/// Bit `i` (0-based) of `word` is position `i + 1` of the code.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentBits {
    word: u64,
    width: usize,
}

impl ContentBits {
    pub fn new(word: u64, width: usize) -> Self {
        assert!(
            (1..=MAX_CODE_BITS).contains(&width),
            "width {width} out of range"
        );
        ContentBits {
            word: word & low_mask(width),
            width,
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let word = bits
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &b)| w | (((b & 1) as u64) << i));
        ContentBits::new(word, bits.len())
    }

    pub fn word(&self) -> u64 {
        self.word
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bit(&self, i: usize) -> u8 {
        ((self.word >> i) & 1) as u8
    }

    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.width).map(|i| self.bit(i)).collect()
    }
}

impl fmt::Debug for ContentBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.width)
            .map(|i| if self.bit(i) == 1 { '1' } else { '0' })
            .collect();
        write!(f, "ContentBits({s})")
    }
}

pub(crate) fn low_mask(width: usize) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Independent Bernoulli parameters, one per code position.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentDistribution {
    bit_probs: Vec<f64>,
}

impl ContentDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        ContentDistribution {
            bit_probs: logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }

    pub fn from_probs(bit_probs: Vec<f64>) -> Result<Self> {
        if bit_probs.is_empty() || bit_probs.len() > MAX_CODE_BITS {
            return Err(Error::Config(format!(
                "content width must be 1..={MAX_CODE_BITS}, got {}",
                bit_probs.len()
            )));
        }
        if bit_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("bit probabilities must lie in [0, 1]".into()));
        }
        Ok(ContentDistribution { bit_probs })
    }

    pub fn bit_probs(&self) -> &[f64] {
        &self.bit_probs
    }

    pub fn width(&self) -> usize {
        self.bit_probs.len()
    }

    pub fn sample(&self, rng: &mut RngStream) -> ContentBits {
        let word = self
            .bit_probs
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &p)| w | ((rng.bernoulli(p) as u64) << i));
        ContentBits::new(word, self.width())
    }

    pub fn log_prob(&self, bits: ContentBits) -> f64 {
        self.log_prob_prefix(bits, self.width())
    }

    /// Log-probability of the first `upto` bits only.
    pub fn log_prob_prefix(&self, bits: ContentBits, upto: usize) -> f64 {
        self.bit_probs[..upto]
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if bits.bit(i) == 1 {
                    clamped_ln(p)
                } else {
                    clamped_ln(1.0 - p)
                }
            })
            .sum()
    }

    /// Gradient of `log_prob_prefix(bits, upto)` w.r.t. the logits: `z_i - p_i`.
    pub fn score(&self, bits: ContentBits, upto: usize) -> Vec<f64> {
        self.bit_probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if i < upto && in_clamp_range(p) {
                    bits.bit(i) as f64 - p
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Applies [`LengthDistribution::score`] row-wise, writing into `out`.
pub(crate) fn length_scores(probs: ArrayView2<f64>, lengths: &[usize], out: &mut Array2<f64>) {
    Zip::from(out.rows_mut())
        .and(probs.rows())
        .and(lengths)
        .for_each(|mut row, p, &l| {
            if !in_clamp_range(p[l - 1]) {
                row.fill(0.0);
                return;
            }
            Zip::from(&mut row).and(&p).for_each(|o, &pk| *o = -pk);
            row[l - 1] += 1.0;
        });
}
