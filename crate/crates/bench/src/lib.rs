//! Fixtures shared by the benchmarks: MNIST-shaped synthetic data and models.

use e2ec::{LabeledDataset, Model, RngStream, Split, StreamId, TrainConfig};
use ndarray::Array2;

pub const INPUT_DIM: usize = 784;
pub const CLASSES: usize = 10;

/// Uniform pixels in `[0, 1)` with uniform labels.
pub fn synthetic(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = RngStream::new(seed, StreamId::Custom(90));
    let inputs = Array2::from_shape_fn((n, INPUT_DIM), |_| rng.uniform());
    let labels = (0..n).map(|_| rng.below(CLASSES)).collect();
    LabeledDataset::new(inputs, labels, CLASSES, Split::Train).expect("valid synthetic data")
}

pub fn config(max_length: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        max_length,
        batch_size,
        ..TrainConfig::default()
    }
}

pub fn model(max_length: usize) -> Model {
    Model::new(&config(max_length, 128), INPUT_DIM, CLASSES).expect("valid config")
}
