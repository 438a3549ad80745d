use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite gradient in {group} ({count} entries); step aborted")]
    NonFiniteGradient { group: String, count: usize },

    #[error("non-finite loss at step {step}: D={distortion}, R={rate}")]
    NonFiniteLoss {
        step: u64,
        distortion: f64,
        rate: f64,
    },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while reading IDX dataset files.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("item count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}
