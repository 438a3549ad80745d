//! Variable-length joint source-channel coding with a learned length head.

pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use channel::{
    channel_law, BinaryChannel, BinarySymmetricChannel, ChannelConfig, ChannelOutput,
};
pub use data::{load_idx, load_mnist, Batcher, LabeledDataset, Split, ToySourceSpec};
pub use decoder::{ClassPosterior, Decoder, EmbeddingGrad, EmbeddingTable};
pub use encoder::{truncate, Codeword, Encoder, EncoderConfig, Encoding, LengthMode};
pub use error::{Error, LoadError, Result};
pub use eval::{ablate_blocks, evaluate, AblationRow, EvalSummary};
pub use heads::{ContentBits, ContentDistribution, LengthDistribution};
pub use net::{AdamConfig, AdamState, Gradients, Network, Parameters};
pub use rng::{RngStream, StreamId};
pub use trainer::{
    collect_batch, decoder_gradient, policy_gradient_theta, policy_gradient_xi, rate_gradient,
    Batch, MetricsRecord, Model, SampleRecord, TrainConfig, Trainer,
};
