//! Exact enumeration over `(x, y, l, z~, zhat)` for tiny instances.
//!
//! Every quantity here is a finite sum, so tests can compare the sampled
//! estimators and the trained objective against ground truth.

use ndarray::Array2;

use crate::channel::{BinaryChannel, BinarySymmetricChannel, ChannelOutput};
use crate::data::ToySourceSpec;
use crate::encoder::{truncate, Encoder};
use crate::error::{Error, Result};
use crate::heads::ContentBits;
use crate::net::Parameters;
use crate::trainer::Model;

pub const MAX_ORACLE_INPUTS: usize = 4;
pub const MAX_ORACLE_LENGTH: usize = 3;

fn check_size(spec: &ToySourceSpec, max_length: usize) -> Result<()> {
    if spec.num_inputs() > MAX_ORACLE_INPUTS || max_length > MAX_ORACLE_LENGTH {
        return Err(Error::Usage(format!(
            "instance too large to enumerate: {} inputs, R_max {} (limits {} and {})",
            spec.num_inputs(),
            max_length,
            MAX_ORACLE_INPUTS,
            MAX_ORACLE_LENGTH
        )));
    }
    Ok(())
}

/// Every received word `(l, bits)` for `l = 1..=max_length`, shortest first.
pub fn all_outputs(max_length: usize) -> Vec<ChannelOutput> {
    (1..=max_length)
        .flat_map(|l| {
            (0u64..1 << l).map(move |w| ChannelOutput::new(w, l, max_length).expect("in range"))
        })
        .collect()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// The joint law of the input and the received word, plus the source table.
#[derive(Clone, Debug)]
pub struct ExactJoint {
    outputs: Vec<ChannelOutput>,
    /// `p(x, zhat)`, indexed `[x][k]` over `outputs`.
    joint: Vec<Vec<f64>>,
    p_x: Vec<f64>,
    p_y_given_x: Vec<Vec<f64>>,
    expected_length: Vec<f64>,
}

/// Pushes the source through the encoder, truncation and the channel.
pub fn enumerate_joint(
    spec: &ToySourceSpec,
    encoder: &Encoder,
    channel: &BinarySymmetricChannel,
) -> Result<ExactJoint> {
    let r_max = encoder.max_length;
    check_size(spec, r_max)?;
    let features = spec.feature_matrix();
    let length_probs = encoder.length_probs(features.view())?;
    let bit_probs = encoder.bit_probs(features.view())?;
    let outputs = all_outputs(r_max);
    let offset = |l: usize| (1usize << l) - 2;

    let p_x = spec.marginal_x();
    let mut joint = vec![vec![0.0; outputs.len()]; spec.num_inputs()];
    let mut expected_length = vec![0.0; spec.num_inputs()];
    for x in 0..spec.num_inputs() {
        for l in 1..=r_max {
            let pl = length_probs[[x, l - 1]];
            expected_length[x] += l as f64 * pl;
            for w in 0u64..1 << r_max {
                let pz: f64 = (0..r_max)
                    .map(|i| {
                        let p = bit_probs[[x, i]];
                        if (w >> i) & 1 == 1 {
                            p
                        } else {
                            1.0 - p
                        }
                    })
                    .product();
                let code = truncate(ContentBits::new(w, r_max), l)?;
                for v in 0u64..1 << l {
                    let k = offset(l) + v as usize;
                    joint[x][k] += p_x[x] * pl * pz * channel.law(&code, &outputs[k])?;
                }
            }
        }
    }
    Ok(ExactJoint {
        outputs,
        joint,
        p_x,
        p_y_given_x: (0..spec.num_inputs())
            .map(|x| spec.conditional(x))
            .collect(),
        expected_length,
    })
}

/// Terms of the variational bound on the semantic distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    /// `E_{X,Zhat}[KL(p(y|x) || p(y|zhat))]`.
    pub semantic_distortion: f64,
    /// `E_Zhat[H(p(y|zhat), q(y|zhat))]`.
    pub cross_entropy: f64,
    /// `E_Zhat[KL(p(y|zhat) || q(y|zhat))]`.
    pub kl: f64,
    pub h_y_given_x: f64,
    pub h_y_given_zhat: f64,
}

impl BoundTerms {
    pub fn gap(&self) -> f64 {
        self.cross_entropy - self.semantic_distortion
    }
}

impl ExactJoint {
    pub fn outputs(&self) -> &[ChannelOutput] {
        &self.outputs
    }

    pub fn num_labels(&self) -> usize {
        self.p_y_given_x[0].len()
    }

    /// `p(x, zhat_k)`.
    pub fn joint(&self, x: usize, k: usize) -> f64 {
        self.joint[x][k]
    }

    pub fn output_prob(&self, k: usize) -> f64 {
        self.joint.iter().map(|row| row[k]).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.joint.iter().flatten().sum()
    }

    /// Exact `p(y | zhat_k)` through the chain `Y - X - Zhat`; `None` if `zhat_k` never occurs.
    pub fn posterior(&self, k: usize) -> Option<Vec<f64>> {
        let pz = self.output_prob(k);
        if pz <= 0.0 {
            return None;
        }
        let mut post = vec![0.0; self.num_labels()];
        for (x, row) in self.joint.iter().enumerate() {
            for (y, p) in post.iter_mut().enumerate() {
                *p += row[k] * self.p_y_given_x[x][y];
            }
        }
        post.iter_mut().for_each(|p| *p /= pz);
        Some(post)
    }

    /// Exact `E[L]`.
    pub fn rate(&self) -> f64 {
        self.p_x
            .iter()
            .zip(&self.expected_length)
            .map(|(p, l)| p * l)
            .sum()
    }

    pub fn h_y_given_x(&self) -> f64 {
        self.p_x
            .iter()
            .zip(&self.p_y_given_x)
            .map(|(p, cond)| p * entropy(cond))
            .sum()
    }

    pub fn h_y_given_zhat(&self) -> f64 {
        (0..self.outputs.len())
            .filter_map(|k| {
                self.posterior(k)
                    .map(|post| self.output_prob(k) * entropy(&post))
            })
            .sum()
    }

    /// Expected KL between the source posterior and the channel-output posterior.
    pub fn semantic_distortion(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.outputs.len() {
            let Some(post) = self.posterior(k) else {
                continue;
            };
            for (x, row) in self.joint.iter().enumerate() {
                if row[k] > 0.0 {
                    total += row[k] * kl(&self.p_y_given_x[x], &post);
                }
            }
        }
        total
    }

    /// Bound terms for a decoder `q`, given as a map from received words to label pmfs.
    pub fn bound<F>(&self, mut q: F) -> Result<BoundTerms>
    where
        F: FnMut(&ChannelOutput) -> Result<Vec<f64>>,
    {
        let (mut cross, mut div) = (0.0, 0.0);
        for (k, out) in self.outputs.iter().enumerate() {
            let Some(post) = self.posterior(k) else {
                continue;
            };
            let qk = q(out)?;
            if qk.len() != post.len() {
                return Err(Error::Dimension {
                    context: "decoder posterior",
                    expected: post.len(),
                    actual: qk.len(),
                });
            }
            let pz = self.output_prob(k);
            cross += pz
                * post
                    .iter()
                    .zip(&qk)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, q)| -p * q.ln())
                    .sum::<f64>();
            div += pz * kl(&post, &qk);
        }
        Ok(BoundTerms {
            semantic_distortion: self.semantic_distortion(),
            cross_entropy: cross,
            kl: div,
            h_y_given_x: self.h_y_given_x(),
            h_y_given_zhat: self.h_y_given_zhat(),
        })
    }

    /// Expected `-log q(y | zhat)` for a table of decoder log-probabilities, one row per output.
    fn distortion_from_log_probs(&self, log_q: &Array2<f64>) -> f64 {
        let mut d = 0.0;
        for (x, row) in self.joint.iter().enumerate() {
            for (k, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (y, &py) in self.p_y_given_x[x].iter().enumerate() {
                    d -= p * py * log_q[[k, y]];
                }
            }
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactObjective {
    pub distortion: f64,
    pub rate: f64,
    pub lagrangian: f64,
}

/// `D`, `R` and `D + lambda R` for the model on the toy source, with no sampling.
pub fn exact_objective(
    spec: &ToySourceSpec,
    model: &Model,
    flip_probability: f64,
    lambda: f64,
) -> Result<ExactObjective> {
    let channel = BinarySymmetricChannel::new(flip_probability)?;
    let joint = enumerate_joint(spec, &model.encoder, &channel)?;
    let batch = model.decoder.forward_batch(joint.outputs())?;
    let labels = spec.num_labels();
    let mut log_q = Array2::zeros((joint.outputs().len(), labels));
    for y in 0..labels {
        let col = batch.label_log_probs(&vec![y; joint.outputs().len()]);
        log_q.column_mut(y).assign(&ndarray::Array1::from(col));
    }
    let distortion = joint.distortion_from_log_probs(&log_q);
    let rate = joint.rate();
    Ok(ExactObjective {
        distortion,
        rate,
        lagrangian: distortion + lambda * rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Length,
    Content,
    Classifier,
    Embedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Length,
        ParamGroup::Content,
        ParamGroup::Classifier,
        ParamGroup::Embedding,
    ];

    pub fn params<'a>(&self, model: &'a Model) -> &'a dyn Parameters {
        match self {
            ParamGroup::Length => &model.encoder.length_net,
            ParamGroup::Content => &model.encoder.content_net,
            ParamGroup::Classifier => &model.decoder.classifier,
            ParamGroup::Embedding => &model.decoder.table,
        }
    }

    pub fn params_mut<'a>(&self, model: &'a mut Model) -> &'a mut dyn Parameters {
        match self {
            ParamGroup::Length => &mut model.encoder.length_net,
            ParamGroup::Content => &mut model.encoder.content_net,
            ParamGroup::Classifier => &mut model.decoder.classifier,
            ParamGroup::Embedding => &mut model.decoder.table,
        }
    }
}

/// Central-difference gradient of the exact Lagrangian w.r.t. one parameter group.
pub fn exact_gradient(
    spec: &ToySourceSpec,
    model: &Model,
    group: ParamGroup,
    flip_probability: f64,
    lambda: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let n = group.params(model).num_params();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = group.params(&probe).get_flat(i);
        group.params_mut(&mut probe).set_flat(i, orig + step);
        let up = exact_objective(spec, &probe, flip_probability, lambda)?.lagrangian;
        group.params_mut(&mut probe).set_flat(i, orig - step);
        let down = exact_objective(spec, &probe, flip_probability, lambda)?.lagrangian;
        group.params_mut(&mut probe).set_flat(i, orig);
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
