//! Training loop: sample collection, the score-function estimators for the
//! encoder heads, backprop for the decoder and the rate term, and the
//! parameter update on `L = D + lambda * R`.
//!
//! Gradient conventions, per batch of N records with `mu_j = log q(y_j | zhat_j)`:
//!
//! * length head:  grad of `-(1/N) sum_j (mu_j - b) log p(l_j | x_j)`
//! * content head: grad of `-(1/N) sum_j (mu_j - b) log p(z~_j | x_j)`
//! * decoder:      grad of `-(1/N) sum_j log q(y_j | zhat_j)`
//! * rate:         grad of `(1/N) sum_j E_{p(l | x_j)}[L]`
//!
//! `mu_j` is a constant in the first two; no gradient flows through it.

use ndarray::{Array2, ArrayView2, Zip};
use serde::Serialize;

use crate::channel::{BinaryChannel, ChannelOutput};
use crate::data::{Batcher, LabeledDataset};
use crate::decoder::{cross_entropy_logit_grad, DecodeBatch, Decoder, EmbeddingGrad};
use crate::encoder::{BatchEncoding, Encoder, EncoderConfig, LengthMode};
use crate::error::{Error, Result};
use crate::heads::{clamped_ln, in_clamp_range, length_scores, ContentBits};
use crate::net::{AdamConfig, AdamState, Gradients, Parameters};
use crate::rng::{RngStream, StreamId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Maximum code length `R_max`.
    pub max_length: usize,
    /// Embedding dimension `d`.
    pub embedding_dim: usize,
    /// Rate multiplier.
    pub lambda: f64,
    /// BSC flip probability.
    pub flip_probability: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// EMA decay of the score baseline; `None` disables the baseline (b = 0).
    pub baseline_decay: Option<f64>,
    pub hidden: Vec<usize>,
    pub sum_all_positions: bool,
    pub length_mode: LengthMode,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
    /// Restrict the content score to the transmitted prefix `z~[1:l]`.
    pub prefix_content_score: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_length: 64,
            embedding_dim: 64,
            lambda: 1e-6,
            flip_probability: 0.1,
            batch_size: 128,
            learning_rate: 1e-3,
            max_steps: 50_000,
            seed: 0,
            baseline_decay: Some(0.99),
            hidden: vec![256, 256],
            sum_all_positions: false,
            length_mode: LengthMode::Learned,
            grad_clip: 10.0,
            prefix_content_score: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        EncoderConfig {
            max_length: self.max_length,
            input_dim: 1,
            hidden: self.hidden.clone(),
            length_mode: self.length_mode,
        }
        .validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if let Some(rho) = self.baseline_decay {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!(
                    "baseline decay must lie in [0, 1), got {rho}"
                )));
            }
        }
        Ok(())
    }
}

/// Encoder and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, StreamId::Init);
        let encoder = Encoder::new(
            &EncoderConfig {
                max_length: config.max_length,
                input_dim,
                hidden: config.hidden.clone(),
                length_mode: config.length_mode,
            },
            &mut rng,
        )?;
        let decoder = Decoder::new(
            config.max_length,
            config.embedding_dim,
            &config.hidden,
            num_classes,
            config.sum_all_positions,
            &mut rng,
        )?;
        Ok(Model { encoder, decoder })
    }

    pub fn max_length(&self) -> usize {
        self.encoder.max_length
    }
}

/// The random streams consumed while sampling a batch.
#[derive(Clone, Debug)]
pub struct SamplingStreams {
    pub length: RngStream,
    pub content: RngStream,
    pub channel: RngStream,
}

impl SamplingStreams {
    pub fn new(seed: u64) -> Self {
        SamplingStreams {
            length: RngStream::new(seed, StreamId::Length),
            content: RngStream::new(seed, StreamId::Content),
            channel: RngStream::new(seed, StreamId::Channel),
        }
    }
}

/// One draw from the joint law of `(x, y, l, z~, zhat)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord {
    /// Row of the source dataset.
    pub index: usize,
    pub label: usize,
    pub length: usize,
    pub content: ContentBits,
    pub received: ChannelOutput,
    pub log_q: f64,
    pub log_p_length: f64,
    pub log_p_content: f64,
}

/// A collected batch plus the forward records needed for its gradients.
#[derive(Clone, Debug)]
pub struct Batch {
    pub records: Vec<SampleRecord>,
    pub encoding: BatchEncoding,
    pub decoding: DecodeBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Per-sample score weights `mu_j = log q(y_j | zhat_j)`.
    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_q).collect()
    }

    /// Mean of `-log q`.
    pub fn distortion(&self) -> f64 {
        -self.records.iter().map(|r| r.log_q).sum::<f64>() / self.len() as f64
    }

    /// Mean expected length over the batch inputs.
    pub fn rate(&self) -> f64 {
        let (m1, _) = length_moments(self.encoding.length_probs.view());
        m1
    }

    pub fn length_variance(&self) -> f64 {
        let (m1, m2) = length_moments(self.encoding.length_probs.view());
        m2 - m1 * m1
    }

    pub fn accuracy(&self) -> f64 {
        let preds = self.decoding.predictions();
        let hits = preds
            .iter()
            .zip(&self.records)
            .filter(|(p, r)| **p == r.label)
            .count();
        hits as f64 / self.len() as f64
    }

    pub fn length_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.encoding.length_probs.ncols()];
        for r in &self.records {
            hist[r.length - 1] += 1;
        }
        hist
    }
}

/// `(E[L], E[L^2])` averaged over the rows of a length-probability matrix.
pub fn length_moments(probs: ArrayView2<f64>) -> (f64, f64) {
    let n = probs.nrows() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for row in probs.rows() {
        for (k, &p) in row.iter().enumerate() {
            let l = (k + 1) as f64;
            m1 += l * p;
            m2 += l * l * p;
        }
    }
    (m1 / n, m2 / n)
}

/// Encodes, transmits and decodes the given rows.
pub fn collect_batch(
    model: &Model,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    indices: &[usize],
    channel: &dyn BinaryChannel,
    streams: &mut SamplingStreams,
) -> Result<Batch> {
    if inputs.nrows() == 0 {
        return Err(Error::Usage("cannot collect an empty batch".into()));
    }
    if labels.len() != inputs.nrows() || indices.len() != inputs.nrows() {
        return Err(Error::Usage("inputs, labels and indices must align".into()));
    }
    let encoding =
        model
            .encoder
            .encode_batch(inputs, &mut streams.length, &mut streams.content, true)?;
    let received: Vec<ChannelOutput> = encoding
        .codewords
        .iter()
        .map(|c| channel.transmit(c, &mut streams.channel))
        .collect();
    let decoding = model.decoder.forward_batch(&received)?;
    let log_q = decoding.label_log_probs(labels);

    let records = (0..inputs.nrows())
        .map(|j| {
            let length = encoding.lengths[j];
            let content = encoding.contents[j];
            let log_p_length = clamped_ln(encoding.length_probs[[j, length - 1]]);
            let log_p_content = encoding
                .bit_probs
                .row(j)
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    if content.bit(i) == 1 {
                        clamped_ln(p)
                    } else {
                        clamped_ln(1.0 - p)
                    }
                })
                .sum();
            SampleRecord {
                index: indices[j],
                label: labels[j],
                length,
                content,
                received: received[j],
                log_q: log_q[j],
                log_p_length,
                log_p_content,
            }
        })
        .collect();
    Ok(Batch {
        records,
        encoding,
        decoding,
    })
}

/// Convenience wrapper that gathers `indices` from a dataset first.
pub fn collect_dataset_batch(
    model: &Model,
    data: &LabeledDataset,
    indices: &[usize],
    channel: &dyn BinaryChannel,
    streams: &mut SamplingStreams,
) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let (x, y) = data.gather(indices);
    collect_batch(model, x.view(), &y, indices, channel, streams)
}

/// Gradient of the length-head surrogate w.r.t. its logits.
pub fn length_score_logit_grad(batch: &Batch, baseline: f64) -> Array2<f64> {
    let probs = batch.encoding.length_probs.view();
    let n = batch.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    length_scores(probs, &batch.encoding.lengths, &mut g);
    for (mut row, r) in g.rows_mut().into_iter().zip(&batch.records) {
        let w = -(r.log_q - baseline) / n;
        row.mapv_inplace(|v| v * w);
    }
    g
}

/// Gradient of the content-head surrogate w.r.t. its logits.
pub fn content_score_logit_grad(batch: &Batch, baseline: f64, prefix_only: bool) -> Array2<f64> {
    let probs = &batch.encoding.bit_probs;
    let n = batch.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    for (j, r) in batch.records.iter().enumerate() {
        let upto = if prefix_only { r.length } else { probs.ncols() };
        let w = -(r.log_q - baseline) / n;
        for i in 0..upto {
            let p = probs[[j, i]];
            if in_clamp_range(p) {
                g[[j, i]] = w * (r.content.bit(i) as f64 - p);
            }
        }
    }
    g
}

/// Gradient of the mean expected length w.r.t. the length logits.
pub fn rate_logit_grad(batch: &Batch) -> Array2<f64> {
    let probs = &batch.encoding.length_probs;
    let n = batch.len() as f64;
    let mut g = probs.clone();
    Zip::from(g.rows_mut())
        .and(probs.rows())
        .for_each(|mut out, p| {
            let mean: f64 = p.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum();
            for (k, o) in out.iter_mut().enumerate() {
                *o *= ((k + 1) as f64 - mean) / n;
            }
        });
    g
}

fn length_backward(
    batch: &Batch,
    encoder: &Encoder,
    logit_grad: ArrayView2<f64>,
) -> Result<Gradients> {
    match (&encoder.length_mode, &batch.encoding.length_tape) {
        (LengthMode::Learned, Some(tape)) => encoder.length_net.backward_params(tape, logit_grad),
        (LengthMode::Learned, None) => {
            Err(Error::Usage("batch was collected without tapes".into()))
        }
        (LengthMode::Fixed(_), _) => Ok(Gradients::zeros_like(&encoder.length_net)),
    }
}

/// Score-function estimate of the length-head gradient of D.
pub fn policy_gradient_theta(batch: &Batch, encoder: &Encoder, baseline: f64) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    length_backward(
        batch,
        encoder,
        length_score_logit_grad(batch, baseline).view(),
    )
}

/// Score-function estimate of the content-head gradient of D.
pub fn policy_gradient_xi(
    batch: &Batch,
    encoder: &Encoder,
    baseline: f64,
    prefix_only: bool,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let tape = batch
        .encoding
        .content_tape
        .as_ref()
        .ok_or_else(|| Error::Usage("batch was collected without tapes".into()))?;
    encoder.content_net.backward_params(
        tape,
        content_score_logit_grad(batch, baseline, prefix_only).view(),
    )
}

/// Exact gradient of the batch cross-entropy w.r.t. the embeddings and classifier.
pub fn decoder_gradient(batch: &Batch, decoder: &Decoder) -> Result<(EmbeddingGrad, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let g = cross_entropy_logit_grad(&batch.decoding, &batch.labels());
    decoder.backward_batch(&batch.decoding, g.view())
}

/// Exact gradient of the mean expected length w.r.t. the length head.
pub fn rate_gradient(batch: &Batch, encoder: &Encoder) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    length_backward(batch, encoder, rate_logit_grad(batch).view())
}

/// Bias-corrected exponential moving average of the batch-mean score weight.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaBaseline {
    decay: Option<f64>,
    value: f64,
    updates: u32,
}

impl EmaBaseline {
    pub fn new(decay: Option<f64>) -> Self {
        EmaBaseline {
            decay,
            value: 0.0,
            updates: 0,
        }
    }

    /// Baseline for the next batch; built only from earlier batches.
    pub fn current(&self) -> f64 {
        match self.decay {
            Some(rho) if self.updates > 0 => {
                let correction = 1.0 - rho.powi(self.updates as i32);
                if correction > 0.0 {
                    self.value / correction
                } else {
                    self.value
                }
            }
            _ => 0.0,
        }
    }

    pub fn update(&mut self, batch_mean: f64) {
        if let Some(rho) = self.decay {
            self.value = rho * self.value + (1.0 - rho) * batch_mean;
            self.updates = self.updates.saturating_add(1);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(rename = "D")]
    pub distortion: f64,
    #[serde(rename = "R")]
    pub rate: f64,
    pub lagrangian: f64,
    #[serde(rename = "acc")]
    pub accuracy: f64,
    #[serde(rename = "var_len")]
    pub length_variance: f64,
    #[serde(rename = "hist_len")]
    pub length_histogram: Vec<usize>,
}

/// Gradients of every parameter group for one step.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub length: Gradients,
    pub content: Gradients,
    pub classifier: Gradients,
    pub embedding: EmbeddingGrad,
}

impl StepGradients {
    pub fn squared_norm(&self) -> f64 {
        self.length.squared_norm()
            + self.content.squared_norm()
            + self.classifier.squared_norm()
            + self.embedding.squared_norm()
    }

    pub fn scale(&mut self, factor: f64) {
        self.length.scale(factor);
        self.content.scale(factor);
        self.classifier.scale(factor);
        self.embedding.scale(factor);
    }
}

/// Combined gradient of `D + lambda * R` for a collected batch, before clipping.
pub fn lagrangian_gradients(
    batch: &Batch,
    model: &Model,
    config: &TrainConfig,
    baseline: f64,
) -> Result<StepGradients> {
    let mut theta_grad = length_score_logit_grad(batch, baseline);
    if config.lambda > 0.0 {
        theta_grad.scaled_add(config.lambda, &rate_logit_grad(batch));
    }
    let length = length_backward(batch, &model.encoder, theta_grad.view())?;
    let content = policy_gradient_xi(batch, &model.encoder, baseline, config.prefix_content_score)?;
    let (embedding, classifier) = decoder_gradient(batch, &model.decoder)?;
    Ok(StepGradients {
        length,
        content,
        classifier,
        embedding,
    })
}

/// Full training state: parameters, optimizer moments, baseline and streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    length_opt: AdamState,
    content_opt: AdamState,
    classifier_opt: AdamState,
    embedding_opt: AdamState,
    baseline: EmaBaseline,
    step: u64,
    streams: SamplingStreams,
    batcher: Option<Batcher>,
    clipped_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let model = Model::new(&config, input_dim, num_classes)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            length_opt: AdamState::new(&model.encoder.length_net, adam)?,
            content_opt: AdamState::new(&model.encoder.content_net, adam)?,
            classifier_opt: AdamState::new(&model.decoder.classifier, adam)?,
            embedding_opt: AdamState::new(&model.decoder.table, adam)?,
            baseline: EmaBaseline::new(config.baseline_decay),
            step: 0,
            streams: SamplingStreams::new(config.seed),
            batcher: None,
            clipped_steps: 0,
            config,
            model,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn baseline(&self) -> f64 {
        self.baseline.current()
    }

    pub fn clipped_steps(&self) -> u64 {
        self.clipped_steps
    }

    pub fn streams_mut(&mut self) -> &mut SamplingStreams {
        &mut self.streams
    }

    /// Samples the next minibatch from `data` and applies one update.
    pub fn step(
        &mut self,
        data: &LabeledDataset,
        channel: &dyn BinaryChannel,
    ) -> Result<MetricsRecord> {
        if self.batcher.is_none() {
            let batch_size = self.config.batch_size.min(data.len());
            self.batcher = Some(Batcher::new(
                data.len(),
                batch_size,
                RngStream::new(self.config.seed, StreamId::Shuffle),
            )?);
        }
        let indices = self
            .batcher
            .as_mut()
            .expect("initialized above")
            .next()
            .expect("endless");
        let batch = collect_dataset_batch(&self.model, data, &indices, channel, &mut self.streams)?;
        self.train_step(&batch)
    }

    /// Applies one update from an already collected batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRecord> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let distortion = batch.distortion();
        let rate = batch.rate();
        if !distortion.is_finite() || !rate.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                distortion,
                rate,
            });
        }
        let baseline = self.baseline.current();
        let mut grads = lagrangian_gradients(batch, &self.model, &self.config, baseline)?;

        for (name, bad) in [
            ("length head", grads.length.count_non_finite()),
            ("content head", grads.content.count_non_finite()),
            ("classifier", grads.classifier.count_non_finite()),
            ("embeddings", grads.embedding.count_non_finite()),
        ] {
            if bad > 0 {
                return Err(Error::NonFiniteGradient {
                    group: format!("{name} at step {}", self.step),
                    count: bad,
                });
            }
        }
        if self.config.grad_clip > 0.0 {
            let norm = grads.squared_norm().sqrt();
            if norm > self.config.grad_clip {
                grads.scale(self.config.grad_clip / norm);
                self.clipped_steps += 1;
            }
        }

        if self.model.encoder.length_mode == LengthMode::Learned {
            self.length_opt.step(
                &mut self.model.encoder.length_net,
                &grads.length,
                "length head",
            )?;
        }
        self.content_opt.step(
            &mut self.model.encoder.content_net,
            &grads.content,
            "content head",
        )?;
        self.classifier_opt.step(
            &mut self.model.decoder.classifier,
            &grads.classifier,
            "classifier",
        )?;
        self.embedding_opt.step(
            &mut self.model.decoder.table,
            &grads.embedding,
            "embeddings",
        )?;

        let weights = batch.weights();
        self.baseline
            .update(weights.iter().sum::<f64>() / weights.len() as f64);
        self.step += 1;

        Ok(MetricsRecord {
            step: self.step,
            distortion,
            rate,
            lagrangian: distortion + self.config.lambda * rate,
            accuracy: batch.accuracy(),
            length_variance: batch.length_variance(),
            length_histogram: batch.length_histogram(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::BinarySymmetricChannel;
    use crate::data::ToySourceSpec;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            max_length: 3,
            embedding_dim: 4,
            lambda: 0.01,
            flip_probability: 0.1,
            batch_size: 8,
            hidden: vec![5],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn toy() -> ToySourceSpec {
        ToySourceSpec::new(
            vec![vec![0.4, 0.1], vec![0.15, 0.35]],
            vec![vec![1.0, -0.5, 0.2], vec![-0.3, 0.8, 1.1]],
        )
        .unwrap()
    }

    fn batch_for(model: &Model, n: usize, seed: u64) -> Batch {
        let data = toy().sample(n, &mut RngStream::new(seed, StreamId::Custom(9)));
        let ch = BinarySymmetricChannel::new(0.1).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        collect_dataset_batch(model, &data, &idx, &ch, &mut SamplingStreams::new(seed)).unwrap()
    }

    #[test]
    fn single_sample_batch_is_reproducible() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let a = batch_for(&model, 1, 4);
        let b = batch_for(&model, 1, 4);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn records_are_channel_consistent() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let b = batch_for(&model, 64, 5);
        for r in &b.records {
            assert_eq!(r.received.len(), r.length);
            let direct = model.encoder.encode_batch(
                ndarray::Array2::<f64>::zeros((0, 3)).view(),
                &mut RngStream::new(0, StreamId::Length),
                &mut RngStream::new(0, StreamId::Content),
                false,
            );
            assert!(direct.is_ok());
        }
        let sum: f64 = b.records.iter().map(|r| r.log_p_content).sum();
        assert!(sum.is_finite());
    }

    #[test]
    fn content_log_prob_factorizes_over_bits() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let b = batch_for(&model, 16, 6);
        for (j, r) in b.records.iter().enumerate() {
            let per_bit: f64 = (0..3)
                .map(|i| {
                    let p = b.encoding.bit_probs[[j, i]];
                    if r.content.bit(i) == 1 {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum();
            assert!((per_bit - r.log_p_content).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_weights_give_zero_score_gradients() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let mut b = batch_for(&model, 16, 7);
        for r in &mut b.records {
            r.log_q = -0.75;
        }
        let g = policy_gradient_theta(&b, &model.encoder, -0.75).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
        let g = policy_gradient_xi(&b, &model.encoder, -0.75, false).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn score_weights_do_not_depend_on_decoder_path() {
        // mu enters only as a per-row scalar: scaling all weights scales the estimate
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let b = batch_for(&model, 16, 8);
        let g1 = policy_gradient_theta(&b, &model.encoder, 0.0).unwrap();
        let mut b2 = b.clone();
        for r in &mut b2.records {
            r.log_q *= 2.0;
        }
        let g2 = policy_gradient_theta(&b2, &model.encoder, 0.0).unwrap();
        for (a, c) in g1.flat().iter().zip(g2.flat()) {
            assert!((2.0 * a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn decoder_gradient_is_order_invariant() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let b = batch_for(&model, 12, 9);
        let (e1, c1) = decoder_gradient(&b, &model.decoder).unwrap();
        let mut received: Vec<ChannelOutput> = b.records.iter().map(|r| r.received).collect();
        let mut labels = b.labels();
        received.reverse();
        labels.reverse();
        let dec = model.decoder.forward_batch(&received).unwrap();
        let g = cross_entropy_logit_grad(&dec, &labels);
        let (e2, c2) = model.decoder.backward_batch(&dec, g.view()).unwrap();
        for (a, c) in e1.flat().iter().zip(e2.flat()) {
            assert!((a - c).abs() < 1e-12);
        }
        for (a, c) in c1.flat().iter().zip(c2.flat()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_ignores_rate() {
        let mut cfg = tiny_config();
        cfg.lambda = 0.0;
        let model = Model::new(&cfg, 3, 2).unwrap();
        let b = batch_for(&model, 16, 10);
        let with = lagrangian_gradients(&b, &model, &cfg, 0.0).unwrap();
        let only = policy_gradient_theta(&b, &model.encoder, 0.0).unwrap();
        assert_eq!(with.length.flat(), only.flat());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        let mut trainer = Trainer::new(cfg, 3, 2).unwrap();
        let before = trainer.model.clone();
        let b = batch_for(&trainer.model, 16, 11);
        let m = trainer.train_step(&b).unwrap();
        assert_eq!(trainer.model, before);
        assert_eq!(m.step, 1);
        assert_eq!(m.length_histogram.iter().sum::<usize>(), 16);
    }

    #[test]
    fn lagrangian_decomposes() {
        let mut trainer = Trainer::new(tiny_config(), 3, 2).unwrap();
        let data = toy().sample(200, &mut RngStream::new(1, StreamId::Custom(1)));
        let ch = BinarySymmetricChannel::new(0.1).unwrap();
        for _ in 0..20 {
            let m = trainer.step(&data, &ch).unwrap();
            assert!((m.lagrangian - (m.distortion + 0.01 * m.rate)).abs() <= 1e-12);
            assert!((1.0..=3.0).contains(&m.rate));
            assert!(m.length_variance >= -1e-12);
        }
    }

    #[test]
    fn baseline_uses_only_past_batches() {
        let mut b = EmaBaseline::new(Some(0.99));
        assert_eq!(b.current(), 0.0);
        b.update(-2.0);
        assert!((b.current() + 2.0).abs() < 1e-12);
        b.update(-1.0);
        let expect = (0.99 * 0.01 * -2.0 - 0.01) / (1.0 - 0.99f64.powi(2));
        assert!((b.current() - expect).abs() < 1e-12);
        let mut off = EmaBaseline::new(None);
        off.update(-3.0);
        assert_eq!(off.current(), 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = Model::new(&tiny_config(), 3, 2).unwrap();
        let empty = LabeledDataset::new(
            ndarray::Array2::zeros((0, 3)),
            vec![],
            2,
            crate::data::Split::Train,
        )
        .unwrap();
        let ch = BinarySymmetricChannel::new(0.1).unwrap();
        assert!(
            collect_dataset_batch(&model, &empty, &[], &ch, &mut SamplingStreams::new(0)).is_err()
        );
    }
}
