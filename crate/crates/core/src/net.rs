//! Dense feed-forward networks with hand-written forward and backward passes.
//!
//! Activations are stored row-major as `(batch, features)`. A network is an
//! ordered list of [`Layer`]s; the usual hidden block is
//! `Dense -> LayerNorm -> ReLU`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

fn next_instance() -> u64 {
    NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed)
}

/// Anything that exposes its trainable values as flat slices in a fixed order.
///
/// Gradient buffers implement this with the same slice layout as the
/// parameters they belong to, which is what the optimizer relies on.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn squared_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn count_non_finite(&self) -> usize {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .filter(|v| !v.is_finite())
            .count()
    }

    /// Read/write a single scalar by flat index. Used by finite-difference checks.
    fn get_flat(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("flat index out of range");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    /// Uniform Glorot initialization with zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((output, input), || {
            rng.inner().random_range(-limit..=limit)
        });
        DenseLayer {
            weights,
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        DenseLayer {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
            epsilon: LAYER_NORM_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    LayerNorm(LayerNormParams),
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadRole {
    /// Produces logits of the code-length distribution.
    Length,
    /// Produces per-bit logits of the code content.
    Content,
    /// Produces class logits from the semantic reconstruction.
    Classifier,
}

impl HeadRole {
    pub fn tag(self) -> u8 {
        match self {
            HeadRole::Length => 0,
            HeadRole::Content => 1,
            HeadRole::Classifier => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HeadRole::Length),
            1 => Some(HeadRole::Content),
            2 => Some(HeadRole::Classifier),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct Network {
    role: HeadRole,
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    instance: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            role: self.role,
            layers: self.layers.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            instance: next_instance(),
            version: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role && self.layers == other.layers
    }
}

impl Network {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(role: HeadRole, layers: Vec<Layer>) -> Result<Self> {
        let input_dim = match layers.first() {
            Some(Layer::Dense(d)) => d.input_dim(),
            _ => {
                return Err(Error::Config(
                    "network must start with a dense layer".into(),
                ))
            }
        };
        let mut dim = input_dim;
        for layer in &layers {
            match layer {
                Layer::Dense(d) => {
                    if d.input_dim() != dim {
                        return Err(Error::Dimension {
                            context: "dense layer input",
                            expected: dim,
                            actual: d.input_dim(),
                        });
                    }
                    if d.bias.len() != d.output_dim() {
                        return Err(Error::Dimension {
                            context: "dense layer bias",
                            expected: d.output_dim(),
                            actual: d.bias.len(),
                        });
                    }
                    dim = d.output_dim();
                }
                Layer::LayerNorm(ln) => {
                    if ln.dim() != dim || ln.shift.len() != dim {
                        return Err(Error::Dimension {
                            context: "layer norm",
                            expected: dim,
                            actual: ln.dim(),
                        });
                    }
                    if ln.epsilon.is_nan() || ln.epsilon <= 0.0 {
                        return Err(Error::Config("layer norm epsilon must be positive".into()));
                    }
                }
                Layer::Relu => {}
            }
        }
        Ok(Network {
            role,
            layers,
            input_dim,
            output_dim: dim,
            instance: next_instance(),
            version: 0,
        })
    }

    /// `Dense -> LayerNorm -> ReLU` for every hidden width, then a dense output layer.
    pub fn mlp(
        role: HeadRole,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut layers = Vec::with_capacity(3 * hidden.len() + 1);
        let mut dim = input_dim;
        for &width in hidden {
            layers.push(Layer::Dense(DenseLayer::glorot(dim, width, rng)));
            layers.push(Layer::LayerNorm(LayerNormParams::new(width)));
            layers.push(Layer::Relu);
            dim = width;
        }
        layers.push(Layer::Dense(DenseLayer::glorot(dim, output_dim, rng)));
        Network::from_layers(role, layers).expect("mlp dimensions chain by construction")
    }

    pub fn role(&self) -> HeadRole {
        self.role
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Hidden widths of the dense layers, excluding the output layer.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.output_dim()),
                _ => None,
            })
            .collect();
        dense[..dense.len() - 1].to_vec()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim,
                actual: input.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut act = input.to_owned();
        for layer in &self.layers {
            act = match layer {
                Layer::Dense(d) => dense_forward(d, act.view()),
                Layer::LayerNorm(ln) => layer_norm_forward(ln, act.view()).0,
                Layer::Relu => {
                    act.mapv_inplace(|v| v.max(0.0));
                    act
                }
            };
        }
        Ok(act)
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = input.to_owned();
        for layer in &self.layers {
            act = match layer {
                Layer::Dense(d) => {
                    let out = dense_forward(d, act.view());
                    caches.push(Cache::Dense { input: act });
                    out
                }
                Layer::LayerNorm(ln) => {
                    let (out, normalized, inv_std) = layer_norm_forward(ln, act.view());
                    caches.push(Cache::LayerNorm {
                        normalized,
                        inv_std,
                    });
                    out
                }
                Layer::Relu => {
                    act.mapv_inplace(|v| v.max(0.0));
                    caches.push(Cache::Relu {
                        output: act.clone(),
                    });
                    act
                }
            };
        }
        let tape = Tape {
            instance: self.instance,
            version: self.version,
            batch: input.nrows(),
            caches,
        };
        Ok((act, tape))
    }

    /// Single-vector convenience wrapper around [`Network::forward`].
    pub fn forward_vec(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Usage(e.to_string()))?;
        let (out, tape) = self.forward(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Gradients w.r.t. every parameter and the input, given the gradient of
    /// a scalar loss w.r.t. the network output.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let (grads, input_grad) = self.backward_impl(tape, output_grad, true)?;
        Ok((grads, input_grad.expect("input gradient requested")))
    }

    /// Like [`Network::backward`] but skips the input gradient of the first layer.
    pub fn backward_params(&self, tape: &Tape, output_grad: ArrayView2<f64>) -> Result<Gradients> {
        Ok(self.backward_impl(tape, output_grad, false)?.0)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        output_grad: ArrayView2<f64>,
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        if tape.instance != self.instance || tape.version != self.version {
            return Err(Error::Usage(
                "tape was recorded against a different or since-modified network".into(),
            ));
        }
        if output_grad.nrows() != tape.batch || output_grad.ncols() != self.output_dim {
            return Err(Error::Dimension {
                context: "output gradient",
                expected: self.output_dim,
                actual: output_grad.ncols(),
            });
        }
        let mut layer_grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut grad = output_grad.to_owned();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let need_dx = want_input_grad || i > 0;
            match (layer, cache) {
                (Layer::Dense(d), Cache::Dense { input }) => {
                    let dw = t_dot(grad.view(), input.view());
                    let db = grad.sum_axis(Axis(0));
                    let next = if need_dx {
                        Some(mat_mul(grad.view(), d.weights.view()))
                    } else {
                        None
                    };
                    layer_grads.push(LayerGrad::Dense {
                        weights: dw,
                        bias: db,
                    });
                    if let Some(n) = next {
                        grad = n;
                    }
                }
                (
                    Layer::LayerNorm(ln),
                    Cache::LayerNorm {
                        normalized,
                        inv_std,
                    },
                ) => {
                    let dgain = (&grad * normalized).sum_axis(Axis(0));
                    let dshift = grad.sum_axis(Axis(0));
                    let dim = ln.dim() as f64;
                    let mut dx = &grad * &ln.gain;
                    Zip::from(dx.rows_mut())
                        .and(normalized.rows())
                        .and(inv_std)
                        .for_each(|mut row, xhat, &s| {
                            let sum = row.sum();
                            let dot = row.dot(&xhat);
                            Zip::from(&mut row).and(&xhat).for_each(|g, &h| {
                                *g = s / dim * (dim * *g - sum - h * dot);
                            });
                        });
                    layer_grads.push(LayerGrad::LayerNorm {
                        gain: dgain,
                        shift: dshift,
                    });
                    grad = dx;
                }
                (Layer::Relu, Cache::Relu { output }) => {
                    Zip::from(&mut grad).and(output).for_each(|g, &o| {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    layer_grads.push(LayerGrad::None);
                }
                _ => return Err(Error::Usage("tape does not match network layers".into())),
            }
        }
        layer_grads.reverse();
        let gradients = Gradients {
            layers: layer_grads,
            count: tape.batch,
        };
        Ok((gradients, if want_input_grad { Some(grad) } else { None }))
    }
}

impl Parameters for Network {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::LayerNorm(ln) => {
                    out.push(ln.gain.as_slice().expect("standard layout"));
                    out.push(ln.shift.as_slice().expect("standard layout"));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::LayerNorm(ln) => {
                    out.push(ln.gain.as_slice_mut().expect("standard layout"));
                    out.push(ln.shift.as_slice_mut().expect("standard layout"));
                }
                Layer::Relu => {}
            }
        }
        out
    }
}

fn dense_forward(d: &DenseLayer, input: ArrayView2<f64>) -> Array2<f64> {
    let mut out = mat_mul(input, d.weights.t());
    out += &d.bias;
    out
}

/// Returns `(output, normalized, inv_std)`.
fn layer_norm_forward(
    ln: &LayerNormParams,
    input: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let mut normalized = input.to_owned();
    let mut inv_std = Array1::zeros(input.nrows());
    Zip::from(normalized.rows_mut())
        .and(&mut inv_std)
        .for_each(|mut row, s| {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            *s = 1.0 / (var + ln.epsilon).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| (v - mean) * inv);
        });
    let mut out = &normalized * &ln.gain;
    out += &ln.shift;
    (out, normalized, inv_std)
}

/// `a b` in row-major layout, whatever layout `dot` would pick.
pub(crate) fn mat_mul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

/// `a^T b` in row-major layout.
pub(crate) fn t_dot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    mat_mul(a.t(), b)
}

/// Pre-affine layer normalization of a single vector.
pub fn normalize(input: &[f64], epsilon: f64) -> Vec<f64> {
    let ln = LayerNormParams {
        gain: Array1::ones(input.len()),
        shift: Array1::zeros(input.len()),
        epsilon,
    };
    let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    layer_norm_forward(&ln, view).1.into_raw_vec_and_offset().0
}

#[derive(Clone, Debug)]
enum Cache {
    Dense {
        input: Array2<f64>,
    },
    LayerNorm {
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Relu {
        output: Array2<f64>,
    },
}

/// Activation record of one forward call.
#[derive(Clone, Debug)]
pub struct Tape {
    instance: u64,
    version: u64,
    batch: usize,
    caches: Vec<Cache>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    Dense {
        weights: Array2<f64>,
        bias: Array1<f64>,
    },
    LayerNorm {
        gain: Array1<f64>,
        shift: Array1<f64>,
    },
    None,
}

/// Parameter gradients of a [`Network`], layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// Number of samples accumulated into this buffer.
    pub count: usize,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerGrad::Dense {
                    weights: Array2::zeros(d.weights.raw_dim()),
                    bias: Array1::zeros(d.bias.len()),
                },
                Layer::LayerNorm(ln) => LayerGrad::LayerNorm {
                    gain: Array1::zeros(ln.dim()),
                    shift: Array1::zeros(ln.dim()),
                },
                Layer::Relu => LayerGrad::None,
            })
            .collect();
        Gradients { layers, count: 0 }
    }

    pub fn zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
        self.count = 0;
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.count += other.count;
    }

    /// True when every slice has the same length as the corresponding parameter slice.
    pub fn congruent_with(&self, net: &Network) -> bool {
        let a = self.slices();
        let b = net.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

impl Parameters for Gradients {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::LayerNorm { gain, shift } => {
                    out.push(gain.as_slice().expect("standard layout"));
                    out.push(shift.as_slice().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    out.push(weights.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::LayerNorm { gain, shift } => {
                    out.push(gain.as_slice_mut().expect("standard layout"));
                    out.push(shift.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Result<Self> {
        if !(config.beta1 > 0.0 && config.beta1 < 1.0 && config.beta2 > 0.0 && config.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient leaves params and state untouched.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, group: &str) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        let bad = grads.count_non_finite();
        if bad > 0 {
            return Err(Error::NonFiniteGradient {
                group: group.to_string(),
                count: bad,
            });
        }
        let g_slices = grads.slices();
        let mut p_slices = params.slices_mut();
        if g_slices.len() != p_slices.len()
            || g_slices
                .iter()
                .zip(&p_slices)
                .any(|(g, p)| g.len() != p.len())
            || self.first.len() != p_slices.len()
        {
            return Err(Error::Usage(format!(
                "gradient shape mismatch in group {group}"
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in p_slices
            .iter_mut()
            .zip(&g_slices)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
