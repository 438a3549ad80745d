//! Lossless binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "E2EC" | version u32 | metadata (u32 len + utf8)
//! max_length u32 | fixed length u32 (0 = learned) | sum_all_positions u8
//! length net | content net | zero table | one table | classifier net
//! ```
//!
//! A network is `role u8 | layer count u32` followed by tagged layers; a matrix
//! is `rows u32 | cols u32 | f64 values`, row-major.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::decoder::{Decoder, EmbeddingTable};
use crate::encoder::{Encoder, LengthMode};
use crate::error::{Error, Result};
use crate::net::{DenseLayer, HeadRole, Layer, LayerNormParams, Network};
use crate::trainer::Model;

const MAGIC: &[u8; 4] = b"E2EC";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_LAYER_NORM: u8 = 1;
const TAG_RELU: u8 = 2;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_matrix(out: &mut Vec<u8>, m: &Array2<f64>) -> Result<()> {
    out.write_u32::<LittleEndian>(m.nrows() as u32)?;
    out.write_u32::<LittleEndian>(m.ncols() as u32)?;
    for &v in m.iter() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_vector(out: &mut Vec<u8>, v: &Array1<f64>) -> Result<()> {
    out.write_u32::<LittleEndian>(v.len() as u32)?;
    for &x in v.iter() {
        out.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_values(input: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let left = input.get_ref().len() - input.position() as usize;
    if n.checked_mul(8).is_none_or(|bytes| bytes > left) {
        return Err(corrupt(format!(
            "expected {n} values, file has {} bytes left",
            left
        )));
    }
    let mut v = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn read_matrix(input: &mut Cursor<&[u8]>) -> Result<Array2<f64>> {
    let rows = input.read_u32::<LittleEndian>()? as usize;
    let cols = input.read_u32::<LittleEndian>()? as usize;
    let values = read_values(input, rows * cols)?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| corrupt(e.to_string()))
}

fn read_vector(input: &mut Cursor<&[u8]>) -> Result<Array1<f64>> {
    let n = input.read_u32::<LittleEndian>()? as usize;
    Ok(Array1::from(read_values(input, n)?))
}

fn write_network(out: &mut Vec<u8>, net: &Network) -> Result<()> {
    out.write_u8(net.role().tag())?;
    out.write_u32::<LittleEndian>(net.layers().len() as u32)?;
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                out.write_u8(TAG_DENSE)?;
                write_matrix(out, &d.weights)?;
                write_vector(out, &d.bias)?;
            }
            Layer::LayerNorm(n) => {
                out.write_u8(TAG_LAYER_NORM)?;
                out.write_f64::<LittleEndian>(n.epsilon)?;
                write_vector(out, &n.gain)?;
                write_vector(out, &n.shift)?;
            }
            Layer::Relu => out.write_u8(TAG_RELU)?,
        }
    }
    Ok(())
}

fn read_network(input: &mut Cursor<&[u8]>) -> Result<Network> {
    let tag = input.read_u8()?;
    let role =
        HeadRole::from_tag(tag).ok_or_else(|| corrupt(format!("unknown head role {tag}")))?;
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match input.read_u8()? {
            TAG_DENSE => Layer::Dense(DenseLayer {
                weights: read_matrix(input)?,
                bias: read_vector(input)?,
            }),
            TAG_LAYER_NORM => {
                let epsilon = input.read_f64::<LittleEndian>()?;
                Layer::LayerNorm(LayerNormParams {
                    epsilon,
                    gain: read_vector(input)?,
                    shift: read_vector(input)?,
                })
            }
            TAG_RELU => Layer::Relu,
            other => return Err(corrupt(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    Network::from_layers(role, layers)
}

/// Serializes a model together with free-form metadata (typically the run config).
pub fn to_bytes(model: &Model, metadata: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(metadata.len() as u32)?;
    out.write_all(metadata.as_bytes())?;
    out.write_u32::<LittleEndian>(model.encoder.max_length as u32)?;
    let fixed = match model.encoder.length_mode {
        LengthMode::Learned => 0,
        LengthMode::Fixed(l) => l as u32,
    };
    out.write_u32::<LittleEndian>(fixed)?;
    out.write_u8(model.decoder.sum_all_positions as u8)?;
    write_network(&mut out, &model.encoder.length_net)?;
    write_network(&mut out, &model.encoder.content_net)?;
    write_matrix(&mut out, &model.decoder.table.zero)?;
    write_matrix(&mut out, &model.decoder.table.one)?;
    write_network(&mut out, &model.decoder.classifier)?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, String)> {
    let mut input = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("file too short for a checkpoint header"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = input.read_u32::<LittleEndian>()? as usize;
    if len > bytes.len() {
        return Err(corrupt("metadata length exceeds file size"));
    }
    let mut meta = vec![0u8; len];
    input.read_exact(&mut meta)?;
    let metadata = String::from_utf8(meta).map_err(|e| corrupt(e.to_string()))?;

    let max_length = input.read_u32::<LittleEndian>()? as usize;
    let length_mode = match input.read_u32::<LittleEndian>()? {
        0 => LengthMode::Learned,
        l => LengthMode::Fixed(l as usize),
    };
    let sum_all = input.read_u8()? != 0;
    let length_net = read_network(&mut input)?;
    let content_net = read_network(&mut input)?;
    let table = EmbeddingTable::from_parts(read_matrix(&mut input)?, read_matrix(&mut input)?)?;
    let classifier = read_network(&mut input)?;
    if (input.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    if table.max_length() != max_length {
        return Err(corrupt(format!(
            "embedding table has {} positions, header says {max_length}",
            table.max_length()
        )));
    }
    let encoder = Encoder::from_parts(length_net, content_net, max_length, length_mode)?;
    let decoder = Decoder::from_parts(table, classifier, sum_all)?;
    Ok((Model { encoder, decoder }, metadata))
}

pub fn save(path: &Path, model: &Model, metadata: &str) -> Result<()> {
    fs::write(path, to_bytes(model, metadata)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, String)> {
    from_bytes(&fs::read(path)?)
}
