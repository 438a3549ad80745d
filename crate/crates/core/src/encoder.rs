//! Structural-decomposition encoder: a length head and a content head whose
//! samples are joined by truncation into a variable-length binary codeword.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::heads::{
    sigmoid_matrix, softmax_rows, ContentBits, ContentDistribution, LengthDistribution,
    MAX_CODE_BITS,
};
use crate::net::{HeadRole, Network, Tape};
use crate::rng::RngStream;

/// A variable-length code: the first `length` bits of a word of `capacity` bits.
///
/// Bits past `length` are always zero so that equality and hashing are canonical.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Codeword {
    word: u64,
    length: usize,
    capacity: usize,
}

impl Codeword {
    pub fn new(word: u64, length: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity > MAX_CODE_BITS {
            return Err(Error::Usage(format!(
                "capacity {capacity} outside 1..={MAX_CODE_BITS}"
            )));
        }
        if length == 0 || length > capacity {
            return Err(Error::Usage(format!(
                "length {length} outside 1..={capacity}"
            )));
        }
        Ok(Codeword {
            word: word & crate::heads::low_mask(length),
            length,
            capacity,
        })
    }

    pub fn from_bits(bits: &[u8], capacity: usize) -> Result<Self> {
        let word = bits
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &b)| w | (((b & 1) as u64) << i));
        Codeword::new(word, bits.len(), capacity)
    }

    pub fn word(&self) -> u64 {
        self.word
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bit(&self, i: usize) -> u8 {
        ((self.word >> i) & 1) as u8
    }

    /// The transmitted bits, `bits[0..length]`.
    pub fn bits(&self) -> Vec<u8> {
        (0..self.length).map(|i| self.bit(i)).collect()
    }

    /// Zero-pads the code back to full capacity.
    pub fn pad(&self) -> ContentBits {
        ContentBits::new(self.word, self.capacity)
    }
}

impl fmt::Display for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.length)?;
        for i in 0..self.length {
            f.write_str(if self.bit(i) == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Codeword({self})")
    }
}

impl FromStr for Codeword {
    type Err = Error;

    /// Parses the `"<length>:<bits>"` form. Capacity is set to `MAX_CODE_BITS`;
    /// use [`Codeword::with_capacity`] to narrow it.
    fn from_str(s: &str) -> Result<Self> {
        let (len, bits) = s
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("codeword {s:?} lacks a length prefix")))?;
        let length: usize = len
            .parse()
            .map_err(|_| Error::Usage(format!("bad codeword length in {s:?}")))?;
        if bits.len() != length {
            return Err(Error::Usage(format!(
                "codeword {s:?} declares {length} bits but carries {}",
                bits.len()
            )));
        }
        let parsed = bits
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0u8),
                b'1' => Ok(1u8),
                _ => Err(Error::Usage(format!("non-binary digit in {s:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Codeword::from_bits(&parsed, MAX_CODE_BITS)
    }
}

impl Codeword {
    pub fn with_capacity(self, capacity: usize) -> Result<Self> {
        Codeword::new(self.word, self.length, capacity)
    }
}

/// Keeps the first `length` bits of `content`.
pub fn truncate(content: ContentBits, length: usize) -> Result<Codeword> {
    if length == 0 || length > content.width() {
        return Err(Error::Usage(format!(
            "truncation length {length} outside 1..={}",
            content.width()
        )));
    }
    Codeword::new(content.word(), length, content.width())
}

/// How the code length is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthMode {
    /// Sampled from the length head.
    Learned,
    /// Pinned to a constant; the length head is bypassed.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub max_length: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub length_mode: LengthMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 || self.max_length > MAX_CODE_BITS {
            return Err(Error::Config(format!(
                "r_max must lie in 1..={MAX_CODE_BITS}, got {}",
                self.max_length
            )));
        }
        if let LengthMode::Fixed(l) = self.length_mode {
            if l == 0 || l > self.max_length {
                return Err(Error::Config(format!(
                    "fixed length {l} outside 1..={}",
                    self.max_length
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub length_net: Network,
    pub content_net: Network,
    pub max_length: usize,
    pub length_mode: LengthMode,
}

/// Everything produced while encoding one input.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub codeword: Codeword,
    pub length: usize,
    pub content: ContentBits,
    pub length_dist: LengthDistribution,
    pub content_dist: ContentDistribution,
}

/// Batched encoder output plus the tapes needed for gradient estimation.
#[derive(Clone, Debug)]
pub struct BatchEncoding {
    pub length_probs: Array2<f64>,
    pub bit_probs: Array2<f64>,
    pub lengths: Vec<usize>,
    pub contents: Vec<ContentBits>,
    pub codewords: Vec<Codeword>,
    pub(crate) length_tape: Option<Tape>,
    pub(crate) content_tape: Option<Tape>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let length_net = Network::mlp(
            HeadRole::Length,
            config.input_dim,
            &config.hidden,
            config.max_length,
            rng,
        );
        let content_net = Network::mlp(
            HeadRole::Content,
            config.input_dim,
            &config.hidden,
            config.max_length,
            rng,
        );
        Ok(Encoder {
            length_net,
            content_net,
            max_length: config.max_length,
            length_mode: config.length_mode,
        })
    }

    /// Assembles an encoder from existing heads, checking output arities.
    pub fn from_parts(
        length_net: Network,
        content_net: Network,
        max_length: usize,
        length_mode: LengthMode,
    ) -> Result<Self> {
        if length_net.output_dim() != max_length || content_net.output_dim() != max_length {
            return Err(Error::Config(format!(
                "encoder heads must output {max_length} values (got {} and {})",
                length_net.output_dim(),
                content_net.output_dim()
            )));
        }
        if length_net.input_dim() != content_net.input_dim() {
            return Err(Error::Config(
                "encoder heads disagree on input dimension".into(),
            ));
        }
        EncoderConfig {
            max_length,
            input_dim: length_net.input_dim(),
            hidden: Vec::new(),
            length_mode,
        }
        .validate()?;
        Ok(Encoder {
            length_net,
            content_net,
            max_length,
            length_mode,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.content_net.input_dim()
    }

    /// Length probabilities for each input row, without sampling.
    pub fn length_probs(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self.length_mode {
            LengthMode::Learned => Ok(softmax_rows(self.length_net.predict(inputs)?.view())),
            LengthMode::Fixed(l) => Ok(point_mass_rows(inputs.nrows(), self.max_length, l)),
        }
    }

    pub fn bit_probs(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(sigmoid_matrix(self.content_net.predict(inputs)?.view()))
    }

    /// Encodes a single input vector.
    pub fn encode(
        &self,
        x: &[f64],
        length_rng: &mut RngStream,
        content_rng: &mut RngStream,
    ) -> Result<Encoding> {
        let view =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Usage(e.to_string()))?;
        let batch = self.encode_batch(view, length_rng, content_rng, false)?;
        Ok(Encoding {
            codeword: batch.codewords[0],
            length: batch.lengths[0],
            content: batch.contents[0],
            length_dist: LengthDistribution::from_probs(batch.length_probs.row(0).to_vec())
                .expect("softmax output is a simplex"),
            content_dist: ContentDistribution::from_probs(batch.bit_probs.row(0).to_vec())
                .expect("sigmoid output lies in [0, 1]"),
        })
    }

    /// Encodes every row of `inputs`. With `record` set, keeps the tapes for backprop.
    pub fn encode_batch(
        &self,
        inputs: ArrayView2<f64>,
        length_rng: &mut RngStream,
        content_rng: &mut RngStream,
        record: bool,
    ) -> Result<BatchEncoding> {
        let n = inputs.nrows();
        let (length_probs, length_tape) = match self.length_mode {
            LengthMode::Learned => {
                if record {
                    let (logits, tape) = self.length_net.forward(inputs)?;
                    (softmax_rows(logits.view()), Some(tape))
                } else {
                    (softmax_rows(self.length_net.predict(inputs)?.view()), None)
                }
            }
            LengthMode::Fixed(l) => (point_mass_rows(n, self.max_length, l), None),
        };
        let (bit_probs, content_tape) = if record {
            let (logits, tape) = self.content_net.forward(inputs)?;
            (sigmoid_matrix(logits.view()), Some(tape))
        } else {
            (
                sigmoid_matrix(self.content_net.predict(inputs)?.view()),
                None,
            )
        };

        let mut lengths = Vec::with_capacity(n);
        let mut contents = Vec::with_capacity(n);
        let mut codewords = Vec::with_capacity(n);
        for j in 0..n {
            let length = match self.length_mode {
                LengthMode::Learned => {
                    let row = length_probs.row(j);
                    crate::heads::sample_categorical(
                        row.as_slice().expect("standard layout"),
                        length_rng.uniform(),
                    ) + 1
                }
                LengthMode::Fixed(l) => l,
            };
            let mut word = 0u64;
            for (i, &p) in bit_probs.row(j).iter().enumerate() {
                word |= (content_rng.bernoulli(p) as u64) << i;
            }
            let content = ContentBits::new(word, self.max_length);
            codewords.push(truncate(content, length)?);
            lengths.push(length);
            contents.push(content);
        }
        Ok(BatchEncoding {
            length_probs,
            bit_probs,
            lengths,
            contents,
            codewords,
            length_tape,
            content_tape,
        })
    }
}

fn point_mass_rows(n: usize, max_length: usize, length: usize) -> Array2<f64> {
    let mut probs = Array2::zeros((n, max_length));
    probs.column_mut(length - 1).fill(1.0);
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DenseLayer, Layer};
    use crate::rng::StreamId;
    use ndarray::Array1;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn single_bit_batches() {
        // one-column products once came back column-major
        for hidden in [vec![], vec![3]] {
            let cfg = EncoderConfig {
                max_length: 1,
                input_dim: 2,
                hidden,
                length_mode: LengthMode::Learned,
            };
            let enc = Encoder::new(&cfg, &mut RngStream::new(1, StreamId::Init)).unwrap();
            let x = ndarray::Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 * 0.1);
            let mut a = RngStream::new(1, StreamId::Length);
            let mut b = RngStream::new(1, StreamId::Content);
            let out = enc.encode_batch(x.view(), &mut a, &mut b, true).unwrap();
            assert_eq!(out.lengths, vec![1; 5]);
        }
    }

    #[test]
    fn truncate_examples() {
        let c = truncate(ContentBits::from_bits(&[0, 1, 1]), 1).unwrap();
        assert_eq!(c.bits(), vec![0]);
        assert_eq!(c.len(), 1);
        let c = truncate(ContentBits::from_bits(&[1, 1]), 2).unwrap();
        assert_eq!(c.bits(), vec![1, 1]);
        assert!(truncate(ContentBits::from_bits(&[1, 1]), 0).is_err());
        assert!(truncate(ContentBits::from_bits(&[1, 1]), 3).is_err());
    }

    #[test]
    fn truncation_is_surjective_onto_short_codes() {
        let mut seen = HashSet::new();
        for word in 0u64..8 {
            for l in 1..=3 {
                seen.insert(truncate(ContentBits::new(word, 3), l).unwrap());
            }
        }
        assert_eq!(seen.len(), 2 + 4 + 8);
    }

    #[test]
    fn pad_then_truncate_round_trips() {
        for s in ["1:1", "3:010", "5:10110"] {
            let c: Codeword = s.parse::<Codeword>().unwrap().with_capacity(8).unwrap();
            assert_eq!(truncate(c.pad(), c.len()).unwrap(), c);
            assert_eq!(c.to_string(), s);
        }
        assert!("3:01".parse::<Codeword>().is_err());
        assert!("2:0x".parse::<Codeword>().is_err());
    }

    /// Single dense layer with zero weights and the given bias, so outputs ignore the input.
    fn constant_net(role: HeadRole, input: usize, bias: Vec<f64>) -> Network {
        let out = bias.len();
        Network::from_layers(
            role,
            vec![Layer::Dense(DenseLayer {
                weights: Array2::zeros((out, input)),
                bias: Array1::from(bias),
            })],
        )
        .unwrap()
    }

    #[test]
    fn forced_length_and_content() {
        let big = 60.0;
        let length_net = constant_net(HeadRole::Length, 2, vec![-big, big, -big, -big]);
        let content_net = constant_net(HeadRole::Content, 2, vec![big, -big, big, big]);
        let enc = Encoder::from_parts(length_net, content_net, 4, LengthMode::Learned).unwrap();
        let mut lr = RngStream::new(1, StreamId::Length);
        let mut cr = RngStream::new(1, StreamId::Content);
        let e = enc.encode(&[0.3, 0.9], &mut lr, &mut cr).unwrap();
        assert_eq!(e.content.to_vec(), vec![1, 0, 1, 1]);
        assert_eq!(e.codeword.bits(), vec![1, 0]);
        assert_eq!(e.codeword.len(), 2);

        let length_net = constant_net(HeadRole::Length, 2, vec![-big, -big, -big, big]);
        let content_net = constant_net(HeadRole::Content, 2, vec![big, -big, big, big]);
        let enc = Encoder::from_parts(length_net, content_net, 4, LengthMode::Learned).unwrap();
        let e = enc.encode(&[0.3, 0.9], &mut lr, &mut cr).unwrap();
        assert_eq!(e.codeword.bits(), e.content.to_vec());
    }

    #[test]
    fn fixed_length_mode_pins_every_code() {
        let mut rng = RngStream::new(3, StreamId::Init);
        let cfg = EncoderConfig {
            max_length: 6,
            input_dim: 3,
            hidden: vec![5],
            length_mode: LengthMode::Fixed(4),
        };
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 3 + j) % 7) as f64 / 7.0);
        let mut lr = RngStream::new(1, StreamId::Length);
        let mut cr = RngStream::new(1, StreamId::Content);
        let b = enc.encode_batch(x.view(), &mut lr, &mut cr, true).unwrap();
        assert!(b.codewords.iter().all(|c| c.len() == 4));
        assert!(b.length_tape.is_none());
    }

    #[test]
    fn encode_never_emits_out_of_range_lengths() {
        let mut rng = RngStream::new(5, StreamId::Init);
        let cfg = EncoderConfig {
            max_length: 5,
            input_dim: 4,
            hidden: vec![8],
            length_mode: LengthMode::Learned,
        };
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((500, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let mut lr = RngStream::new(2, StreamId::Length);
        let mut cr = RngStream::new(2, StreamId::Content);
        let b = enc.encode_batch(x.view(), &mut lr, &mut cr, false).unwrap();
        assert!(b.lengths.iter().all(|&l| (1..=5).contains(&l)));
        for (c, (&l, z)) in b.codewords.iter().zip(b.lengths.iter().zip(&b.contents)) {
            assert_eq!(*c, truncate(*z, l).unwrap());
        }
    }

    #[test]
    fn codeword_law_matches_enumeration() {
        let mut rng = RngStream::new(8, StreamId::Init);
        let cfg = EncoderConfig {
            max_length: 2,
            input_dim: 2,
            hidden: vec![3],
            length_mode: LengthMode::Learned,
        };
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let x = [0.4, -0.7];
        let mut lr = RngStream::new(9, StreamId::Length);
        let mut cr = RngStream::new(9, StreamId::Content);
        let first = enc.encode(&x, &mut lr, &mut cr).unwrap();

        // exact law: sum over (l, z~) of p(l) p(z~) [truncate(z~, l) = c]
        let mut exact: HashMap<Codeword, f64> = HashMap::new();
        for l in 1..=2 {
            for w in 0u64..4 {
                let z = ContentBits::new(w, 2);
                let p = first.length_dist.prob(l) * first.content_dist.log_prob(z).exp();
                *exact.entry(truncate(z, l).unwrap()).or_default() += p;
            }
        }
        let n = 100_000;
        let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
        let b = enc
            .encode_batch(xs.view(), &mut lr, &mut cr, false)
            .unwrap();
        let mut counts: HashMap<Codeword, usize> = HashMap::new();
        for c in &b.codewords {
            *counts.entry(*c).or_default() += 1;
        }
        for (c, p) in exact {
            let freq = *counts.get(&c).unwrap_or(&0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * sigma + 1e-12, "{c}: {freq} vs {p}");
        }
    }
}
