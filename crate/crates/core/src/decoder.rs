//! One-to-one embedding decoder: each received bit selects one of two
//! per-position vectors, the vectors are summed into a semantic
//! reconstruction, and a classifier maps that to a posterior over labels.

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, Normal};

use crate::channel::ChannelOutput;
use crate::error::{Error, Result};
use crate::heads::{log_softmax_rows, softmax, softmax_rows};
use crate::net::{mat_mul, t_dot, Gradients, HeadRole, Network, Parameters, Tape};
use crate::rng::RngStream;

/// Floor applied to decoded log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -690.0;

/// Per-position affine embeddings `e^i(b) = b * one[i] + zero[i]`.
///
/// `one[i]` is the difference between the embeddings of bit value 1 and 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub zero: Array2<f64>,
    pub one: Array2<f64>,
}

impl EmbeddingTable {
    /// Every coordinate i.i.d. `N(0, 1/d)`, so each vector has unit expected squared norm.
    pub fn init(max_length: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 || max_length == 0 {
            return Err(Error::Config(
                "embedding table needs d >= 1 and r_max >= 1".into(),
            ));
        }
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        let zero = Array2::from_shape_simple_fn((max_length, dim), || normal.sample(rng.inner()));
        let one = Array2::from_shape_simple_fn((max_length, dim), || normal.sample(rng.inner()));
        Ok(EmbeddingTable { zero, one })
    }

    pub fn from_parts(zero: Array2<f64>, one: Array2<f64>) -> Result<Self> {
        if zero.raw_dim() != one.raw_dim() {
            return Err(Error::Config("embedding halves must share a shape".into()));
        }
        Ok(EmbeddingTable {
            zero: zero.as_standard_layout().to_owned(),
            one: one.as_standard_layout().to_owned(),
        })
    }

    pub fn max_length(&self) -> usize {
        self.zero.nrows()
    }

    pub fn dim(&self) -> usize {
        self.zero.ncols()
    }

    /// Embedding of bit `bit` at 0-based position `i`.
    pub fn embedding(&self, i: usize, bit: u8) -> Array1<f64> {
        if bit == 1 {
            &self.one.row(i) + &self.zero.row(i)
        } else {
            self.zero.row(i).to_owned()
        }
    }

    /// Semantic reconstruction of one received code.
    pub fn embed_sum(&self, received: &ChannelOutput, sum_all_positions: bool) -> Vec<f64> {
        let upto = if sum_all_positions {
            self.max_length()
        } else {
            received.len()
        };
        let padded = received.padded();
        let mut x = Array1::zeros(self.dim());
        for i in 0..upto {
            x += &self.zero.row(i);
            if padded.bit(i) == 1 {
                x += &self.one.row(i);
            }
        }
        x.to_vec()
    }

    /// Batched reconstruction `x = B * one + M * zero`.
    pub fn embed_batch(
        &self,
        received: &[ChannelOutput],
        sum_all_positions: bool,
    ) -> (Array2<f64>, EmbedCache) {
        let n = received.len();
        let r = self.max_length();
        let mut bits = Array2::zeros((n, r));
        let mut mask = Array2::zeros((n, r));
        for (j, out) in received.iter().enumerate() {
            let upto = if sum_all_positions {
                r
            } else {
                out.len().min(r)
            };
            for i in 0..upto {
                mask[[j, i]] = 1.0;
                bits[[j, i]] = ((out.word() >> i) & 1) as f64;
            }
        }
        let mut x = mat_mul(bits.view(), self.one.view());
        x += &mat_mul(mask.view(), self.zero.view());
        (x, EmbedCache { bits, mask })
    }

    /// Gradient of a scalar w.r.t. the table, given its gradient w.r.t. the reconstructions.
    pub fn backward(&self, cache: &EmbedCache, grad: ArrayView2<f64>) -> EmbeddingGrad {
        EmbeddingGrad {
            zero: t_dot(cache.mask.view(), grad.view()),
            one: t_dot(cache.bits.view(), grad.view()),
        }
    }

    /// `||e_1^i||_2` for every position: the distance between the two embeddings of bit i.
    pub fn one_norms(&self) -> Vec<f64> {
        self.one
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }

    /// Largest `|<u_i, u_j>|` over distinct positions, with `u_i` the unit-normalized
    /// difference vectors. Zero vectors are skipped.
    pub fn max_cross_inner_product(&self) -> f64 {
        let units: Vec<Option<Array1<f64>>> = self
            .one
            .rows()
            .into_iter()
            .map(|r| {
                let n = r.dot(&r).sqrt();
                (n > 0.0).then(|| &r / n)
            })
            .collect();
        let mut best = 0.0f64;
        for i in 0..units.len() {
            for j in i + 1..units.len() {
                if let (Some(a), Some(b)) = (&units[i], &units[j]) {
                    best = best.max(a.dot(b).abs());
                }
            }
        }
        best
    }
}

impl Parameters for EmbeddingTable {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.zero.as_slice().expect("standard layout"),
            self.one.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.zero.as_slice_mut().expect("standard layout"),
            self.one.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Masked bit and presence matrices recorded by [`EmbeddingTable::embed_batch`].
#[derive(Clone, Debug)]
pub struct EmbedCache {
    bits: Array2<f64>,
    mask: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrad {
    pub zero: Array2<f64>,
    pub one: Array2<f64>,
}

impl EmbeddingGrad {
    pub fn zeros_like(table: &EmbeddingTable) -> Self {
        EmbeddingGrad {
            zero: Array2::zeros(table.zero.raw_dim()),
            one: Array2::zeros(table.one.raw_dim()),
        }
    }
}

impl Parameters for EmbeddingGrad {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.zero.as_slice().expect("standard layout"),
            self.one.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.zero.as_slice_mut().expect("standard layout"),
            self.one.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosterior {
    pub probs: Vec<f64>,
}

impl ClassPosterior {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub table: EmbeddingTable,
    pub classifier: Network,
    /// Sum every position, padding included, instead of only the received prefix.
    pub sum_all_positions: bool,
}

/// Forward record of a batched decode.
#[derive(Clone, Debug)]
pub struct DecodeBatch {
    pub reconstructions: Array2<f64>,
    pub logits: Array2<f64>,
    /// Row-wise log-softmax of `logits`.
    pub log_probs: Array2<f64>,
    cache: EmbedCache,
    tape: Tape,
}

impl DecodeBatch {
    pub fn posteriors(&self) -> Array2<f64> {
        softmax_rows(self.logits.view())
    }

    /// `log q(y_j | zhat_j)` for each row, floored at [`LOG_PROB_FLOOR`].
    pub fn label_log_probs(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(j, &y)| self.log_probs[[j, y]].max(LOG_PROB_FLOOR))
            .collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect()
    }
}

impl Decoder {
    pub fn new(
        max_length: usize,
        dim: usize,
        hidden: &[usize],
        num_classes: usize,
        sum_all_positions: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let table = EmbeddingTable::init(max_length, dim, rng)?;
        let classifier = Network::mlp(HeadRole::Classifier, dim, hidden, num_classes, rng);
        Ok(Decoder {
            table,
            classifier,
            sum_all_positions,
        })
    }

    pub fn from_parts(
        table: EmbeddingTable,
        classifier: Network,
        sum_all_positions: bool,
    ) -> Result<Self> {
        if classifier.input_dim() != table.dim() {
            return Err(Error::Dimension {
                context: "classifier input vs embedding dimension",
                expected: table.dim(),
                actual: classifier.input_dim(),
            });
        }
        Ok(Decoder {
            table,
            classifier,
            sum_all_positions,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn embed_sum(&self, received: &ChannelOutput) -> Vec<f64> {
        self.table.embed_sum(received, self.sum_all_positions)
    }

    pub fn classify(&self, reconstruction: &[f64]) -> Result<ClassPosterior> {
        let view = ArrayView2::from_shape((1, reconstruction.len()), reconstruction)
            .map_err(|e| Error::Usage(e.to_string()))?;
        let logits = self.classifier.predict(view)?;
        Ok(ClassPosterior {
            probs: softmax(logits.row(0).as_slice().expect("standard layout")),
        })
    }

    pub fn posterior(&self, received: &ChannelOutput) -> Result<ClassPosterior> {
        self.classify(&self.embed_sum(received))
    }

    /// `log q(label | received)`.
    pub fn decode_log_prob(&self, received: &ChannelOutput, label: usize) -> Result<f64> {
        let batch = self.forward_batch(std::slice::from_ref(received))?;
        Ok(batch.label_log_probs(&[label])[0])
    }

    pub fn forward_batch(&self, received: &[ChannelOutput]) -> Result<DecodeBatch> {
        let (reconstructions, cache) = self.table.embed_batch(received, self.sum_all_positions);
        let (logits, tape) = self.classifier.forward(reconstructions.view())?;
        let log_probs = log_softmax_rows(logits.view());
        Ok(DecodeBatch {
            reconstructions,
            logits,
            log_probs,
            cache,
            tape,
        })
    }

    /// Logits only; no tape is kept.
    pub fn predict_batch(&self, received: &[ChannelOutput]) -> Result<Array2<f64>> {
        let (x, _) = self.table.embed_batch(received, self.sum_all_positions);
        self.classifier.predict(x.view())
    }

    /// Backpropagates a gradient on the logits through the classifier and the table.
    pub fn backward_batch(
        &self,
        batch: &DecodeBatch,
        logit_grad: ArrayView2<f64>,
    ) -> Result<(EmbeddingGrad, Gradients)> {
        let (classifier_grad, x_grad) = self.classifier.backward(&batch.tape, logit_grad)?;
        Ok((
            self.table.backward(&batch.cache, x_grad.view()),
            classifier_grad,
        ))
    }
}

/// Gradient of `-(1/N) sum_j log q(y_j | .)` w.r.t. the logits: `(softmax - onehot) / N`.
pub fn cross_entropy_logit_grad(batch: &DecodeBatch, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = batch.posteriors();
    for (j, &y) in labels.iter().enumerate() {
        g[[j, y]] -= 1.0;
    }
    g.mapv_inplace(|v| v / n);
    g
}
