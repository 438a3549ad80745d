//! Held-out evaluation and bit-block ablation.

use std::ops::Range;

use ndarray::Axis;

use crate::channel::{BinaryChannel, ChannelOutput};
use crate::data::LabeledDataset;
use crate::decoder::{argmax, LOG_PROB_FLOOR};
use crate::error::{Error, Result};
use crate::heads::{log_softmax_rows, low_mask};
use crate::rng::{RngStream, StreamId};
use crate::trainer::{length_moments, Model, SamplingStreams};

/// Rows processed per forward pass.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    /// Mean `-log q(y | zhat)` in nats.
    pub distortion: f64,
    /// Mean expected length in bits.
    pub rate: f64,
    pub accuracy: f64,
    pub length_variance: f64,
    pub length_histogram: Vec<usize>,
}

/// Replaces the received bits at positions in `block` by fair coin flips.
pub fn ablate(
    received: &ChannelOutput,
    block: &Range<usize>,
    rng: &mut RngStream,
) -> ChannelOutput {
    let mut word = received.word();
    for i in block.clone() {
        // draw for every position so the stream does not depend on the length
        let coin = rng.bernoulli(0.5) as u64;
        if i < received.len() {
            word = (word & !(1u64 << i)) | (coin << i);
        }
    }
    received.with_word(word & low_mask(received.len()))
}

/// One pass over `data` with fresh length, content and channel draws from `seed`.
pub fn evaluate(
    model: &Model,
    data: &LabeledDataset,
    channel: &dyn BinaryChannel,
    seed: u64,
    ablation: Option<Range<usize>>,
) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    if data.dim() != model.encoder.input_dim() {
        return Err(Error::Dimension {
            context: "evaluation input",
            expected: model.encoder.input_dim(),
            actual: data.dim(),
        });
    }
    let mut streams = SamplingStreams::new(seed);
    let mut ablation_rng = RngStream::new(seed, StreamId::Ablation);
    let r_max = model.max_length();
    let mut hist = vec![0usize; r_max];
    let (mut nll, mut m1, mut m2) = (0.0, 0.0, 0.0);
    let mut hits = 0usize;

    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let inputs = data.inputs.slice(ndarray::s![start..end, ..]);
        let labels = &data.labels[start..end];
        let enc =
            model
                .encoder
                .encode_batch(inputs, &mut streams.length, &mut streams.content, false)?;
        let received: Vec<ChannelOutput> = enc
            .codewords
            .iter()
            .map(|c| {
                let r = channel.transmit(c, &mut streams.channel);
                match &ablation {
                    Some(block) => ablate(&r, block, &mut ablation_rng),
                    None => r,
                }
            })
            .collect();
        let logits = model.decoder.predict_batch(&received)?;
        let log_probs = log_softmax_rows(logits.view());
        for (j, row) in log_probs.axis_iter(Axis(0)).enumerate() {
            nll -= row[labels[j]].max(LOG_PROB_FLOOR);
            if argmax(row.as_slice().expect("standard layout")) == labels[j] {
                hits += 1;
            }
            hist[enc.lengths[j] - 1] += 1;
        }
        let (a, b) = length_moments(enc.length_probs.view());
        let rows = (end - start) as f64;
        m1 += a * rows;
        m2 += b * rows;
        start = end;
    }
    let n = data.len() as f64;
    let rate = m1 / n;
    Ok(EvalSummary {
        count: data.len(),
        distortion: nll / n,
        rate,
        accuracy: hits as f64 / n,
        length_variance: (m2 / n - rate * rate).max(0.0),
        length_histogram: hist,
    })
}

/// Splits `0..max_length` into `blocks` contiguous ranges; the last may be shorter.
pub fn bit_blocks(max_length: usize, blocks: usize) -> Result<Vec<Range<usize>>> {
    if blocks == 0 || blocks > max_length {
        return Err(Error::Usage(format!(
            "block count must lie in 1..={max_length}, got {blocks}"
        )));
    }
    let width = max_length.div_ceil(blocks);
    Ok((0..blocks)
        .map(|b| (b * width).min(max_length)..((b + 1) * width).min(max_length))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub block: usize,
    pub bits: Range<usize>,
    pub distortion: f64,
    pub delta_distortion: f64,
    pub accuracy: f64,
}

/// Distortion increase from randomizing each bit block in turn, against an
/// unablated pass that shares the same seed.
pub fn ablate_blocks(
    model: &Model,
    data: &LabeledDataset,
    channel: &dyn BinaryChannel,
    seed: u64,
    blocks: usize,
) -> Result<(EvalSummary, Vec<AblationRow>)> {
    let reference = evaluate(model, data, channel, seed, None)?;
    let rows = bit_blocks(model.max_length(), blocks)?
        .into_iter()
        .enumerate()
        .map(|(k, bits)| {
            let s = evaluate(model, data, channel, seed, Some(bits.clone()))?;
            Ok(AblationRow {
                block: k,
                bits,
                distortion: s.distortion,
                delta_distortion: s.distortion - reference.distortion,
                accuracy: s.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((reference, rows))
}
