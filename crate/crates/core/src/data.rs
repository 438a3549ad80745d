//! Dataset ingestion: IDX files (the MNIST distribution format), shuffled
//! minibatching, and small explicit joint tables for enumeration tests.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;

use crate::error::{Error, LoadError, Result};
use crate::rng::RngStream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS),
            Split::Test => (MNIST_TEST_IMAGES, MNIST_TEST_LABELS),
        }
    }
}

/// Inputs as rows of `inputs`, joined to `labels` only by row index.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Usage(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Usage(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    /// Copies the selected rows into a dense batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((indices.len(), self.dim()));
        for (row, &i) in x.rows_mut().into_iter().zip(indices) {
            let mut row = row;
            row.assign(&self.inputs.row(i));
        }
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// First `n` items, in file order.
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        LoadError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() >= 4 {
        let found = BigEndian::read_u32(&bytes[..4]);
        if found != magic {
            return Err(LoadError::BadMagic {
                path: path.display().to_string(),
                expected: magic,
                found,
            }
            .into());
        }
    }
    if bytes.len() < need {
        return Err(LoadError::Truncated {
            path: path.display().to_string(),
            expected: need,
            found: bytes.len(),
        }
        .into());
    }
    Ok((0..dims)
        .map(|k| BigEndian::read_u32(&bytes[4 + 4 * k..8 + 4 * k]) as usize)
        .collect())
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let dims = header(&bytes, path, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() < expected {
        return Err(LoadError::Truncated {
            path: path.display().to_string(),
            expected,
            found: payload.len(),
        }
        .into());
    }
    Ok((count, rows, cols, payload[..expected].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let count = header(&bytes, path, LABEL_MAGIC, 1)?[0];
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(LoadError::Truncated {
            path: path.display().to_string(),
            expected: count,
            found: payload.len(),
        }
        .into());
    }
    Ok(payload[..count].to_vec())
}

/// Loads an image/label IDX pair, scaling pixels by 1/255.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = read_idx_images(images)?;
    let label_bytes = read_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(LoadError::CountMismatch {
            images: count,
            labels: label_bytes.len(),
        }
        .into());
    }
    let inputs = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Usage(e.to_string()))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledDataset::new(inputs, labels, num_classes, split)
}

/// Loads the standard MNIST file pair for `split` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = split.file_names();
    load_idx(&dir.join(images), &dir.join(labels), split)
}

pub fn write_idx_images<W: Write>(
    mut out: W,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> io::Result<()> {
    let count = pixels.len() / (rows * cols);
    out.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    out.write_u32::<BigEndian>(count as u32)?;
    out.write_u32::<BigEndian>(rows as u32)?;
    out.write_u32::<BigEndian>(cols as u32)?;
    out.write_all(pixels)
}

pub fn write_idx_labels<W: Write>(mut out: W, labels: &[u8]) -> io::Result<()> {
    out.write_u32::<BigEndian>(LABEL_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.write_all(labels)
}

/// Shuffled minibatches of dataset indices, reshuffled every epoch.
///
/// The last batch of an epoch holds the remainder when `batch_size` does not
/// divide the dataset size, so every index appears exactly once per epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    epoch: u64,
    rng: RngStream,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, rng: RngStream) -> Result<Self> {
        if len == 0 {
            return Err(Error::Usage("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::Usage(format!(
                "batch size {batch_size} must lie in 1..={len}"
            )));
        }
        let mut b = Batcher {
            order: (0..len).collect(),
            batch_size,
            cursor: 0,
            epoch: 0,
            rng,
        };
        b.order.shuffle(b.rng.inner());
        Ok(b)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for Batcher {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(self.rng.inner());
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

/// Uniform minibatches over `0..len`; see [`Batcher`].
pub fn batches(len: usize, batch_size: usize, rng: RngStream) -> Result<Batcher> {
    Batcher::new(len, batch_size, rng)
}

/// An explicit joint table `p(x, y)` with one feature vector per input symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySourceSpec {
    /// `joint[x][y]`
    pub joint: Vec<Vec<f64>>,
    /// Feature vector fed to the encoder for each input symbol.
    pub features: Vec<Vec<f64>>,
}

impl ToySourceSpec {
    pub fn new(joint: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> Result<Self> {
        let spec = ToySourceSpec { joint, features };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.joint.len();
        if nx == 0 || nx > 4 || self.features.len() != nx {
            return Err(Error::Config(format!(
                "toy source needs 1..=4 inputs with one feature vector each (got {nx} rows, {} feature vectors)",
                self.features.len()
            )));
        }
        let ny = self.joint[0].len();
        if ny == 0 || ny > 4 || self.joint.iter().any(|r| r.len() != ny) {
            return Err(Error::Config(
                "toy source needs 1..=4 labels in every row".into(),
            ));
        }
        let dim = self.features[0].len();
        if dim == 0 || self.features.iter().any(|f| f.len() != dim) {
            return Err(Error::Config(
                "toy feature vectors must share a dimension".into(),
            ));
        }
        let total: f64 = self.joint.iter().flatten().sum();
        if self.joint.iter().flatten().any(|&p| p.is_nan() || p < 0.0)
            || (total - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(
                "toy joint pmf must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }

    pub fn num_inputs(&self) -> usize {
        self.joint.len()
    }

    pub fn num_labels(&self) -> usize {
        self.joint[0].len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.joint.iter().map(|r| r.iter().sum()).collect()
    }

    /// `p(y | x)`.
    pub fn conditional(&self, x: usize) -> Vec<f64> {
        let px: f64 = self.joint[x].iter().sum();
        self.joint[x].iter().map(|p| p / px).collect()
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_inputs(), self.dim()), |(i, j)| {
            self.features[i][j]
        })
    }

    /// Draws `n` labelled samples; inputs are the feature vectors.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> LabeledDataset {
        let flat: Vec<f64> = self.joint.iter().flatten().copied().collect();
        let ny = self.num_labels();
        let mut inputs = Array2::zeros((n, self.dim()));
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let cell = crate::heads::sample_categorical(&flat, rng.uniform());
            let (x, y) = (cell / ny, cell % ny);
            inputs
                .row_mut(j)
                .assign(&ArrayView1::from(self.features[x].as_slice()));
            labels.push(y);
        }
        LabeledDataset {
            inputs,
            labels,
            num_classes: ny,
            split: Split::Train,
        }
    }

    /// Input symbol whose feature vector equals `features`.
    pub fn index_of(&self, features: ArrayView1<f64>) -> Option<usize> {
        self.features
            .iter()
            .position(|f| f.iter().zip(features.iter()).all(|(a, b)| a == b))
    }
}
