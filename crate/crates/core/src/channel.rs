//! Binary channels acting on the transmitted bits of a codeword.
//!
//! The length of a codeword travels as reliably framed side information; only
//! the payload bits are exposed to the channel.

use crate::encoder::Codeword;
use crate::error::{Error, Result};
use crate::heads::{low_mask, ContentBits};
use crate::rng::RngStream;

/// Received bits. `length` always equals the length of the sent codeword.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelOutput {
    word: u64,
    length: usize,
    capacity: usize,
}

impl ChannelOutput {
    pub fn new(word: u64, length: usize, capacity: usize) -> Result<Self> {
        // same shape rules as a codeword
        let c = Codeword::new(word, length, capacity)?;
        Ok(ChannelOutput {
            word: c.word(),
            length,
            capacity,
        })
    }

    pub fn from_bits(bits: &[u8], capacity: usize) -> Result<Self> {
        let c = Codeword::from_bits(bits, capacity)?;
        Ok(ChannelOutput::noiseless(&c))
    }

    /// What the receiver sees when nothing is flipped.
    pub fn noiseless(code: &Codeword) -> Self {
        ChannelOutput {
            word: code.word(),
            length: code.len(),
            capacity: code.capacity(),
        }
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

    pub fn bits(&self) -> Vec<u8> {
        (0..self.length).map(|i| self.bit(i)).collect()
    }

    /// Zero-padded to full capacity.
    pub fn padded(&self) -> ContentBits {
        ContentBits::new(self.word, self.capacity)
    }

    pub(crate) fn with_word(&self, word: u64) -> Self {
        ChannelOutput {
            word: word & low_mask(self.length),
            ..*self
        }
    }
}

/// A memoryless binary channel with a computable transition law.
pub trait BinaryChannel {
    fn transmit(&self, code: &Codeword, rng: &mut RngStream) -> ChannelOutput;

    /// `P(received | sent)`.
    fn law(&self, sent: &Codeword, received: &ChannelOutput) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    /// Per-bit flip probability `p_e`.
    pub flip_probability: f64,
}

impl ChannelConfig {
    pub fn new(flip_probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0, 1], got {flip_probability}"
            )));
        }
        Ok(ChannelConfig { flip_probability })
    }

    pub fn build(&self) -> BinarySymmetricChannel {
        BinarySymmetricChannel { config: *self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarySymmetricChannel {
    config: ChannelConfig,
}

impl BinarySymmetricChannel {
    pub fn new(flip_probability: f64) -> Result<Self> {
        Ok(ChannelConfig::new(flip_probability)?.build())
    }

    pub fn flip_probability(&self) -> f64 {
        self.config.flip_probability
    }
}

impl BinaryChannel for BinarySymmetricChannel {
    fn transmit(&self, code: &Codeword, rng: &mut RngStream) -> ChannelOutput {
        let p = self.config.flip_probability;
        let mut flips = 0u64;
        for i in 0..code.len() {
            flips |= (rng.bernoulli(p) as u64) << i;
        }
        ChannelOutput {
            word: code.word() ^ flips,
            length: code.len(),
            capacity: code.capacity(),
        }
    }

    fn law(&self, sent: &Codeword, received: &ChannelOutput) -> Result<f64> {
        if sent.len() != received.len() {
            return Err(Error::Usage(format!(
                "channel law needs equal lengths, got {} and {}",
                sent.len(),
                received.len()
            )));
        }
        let p = self.config.flip_probability;
        let flips = (sent.word() ^ received.word()).count_ones() as i32;
        let kept = sent.len() as i32 - flips;
        Ok(p.powi(flips) * (1.0 - p).powi(kept))
    }
}

/// Convenience wrapper: `P(received | sent)` under a BSC with flip probability `cfg`.
pub fn channel_law(sent: &Codeword, received: &ChannelOutput, cfg: ChannelConfig) -> Result<f64> {
    cfg.build().law(sent, received)
}
