//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The MNIST criteria read the IDX files from `E2EC_MNIST_DIR`
//! (default `/root/data/mnist`) and train for tens of minutes.
//! `E2EC_ACCEPT_ONLY=1,2,10` runs a subset. Run outputs go to a temporary
//! directory unless `E2EC_ACCEPT_DIR` names one to keep.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use e2ec::eval::evaluate;
use e2ec::net::Parameters;
use e2ec::oracle::{enumerate_joint, exact_gradient, ParamGroup};
use e2ec::trainer::{collect_batch, policy_gradient_theta, policy_gradient_xi, SamplingStreams};
use e2ec::{
    channel_law, decoder_gradient, rate_gradient, truncate, BinaryChannel, BinarySymmetricChannel,
    ChannelConfig, Codeword, ContentBits, EvalSummary, LabeledDataset, Model, RngStream, Split,
    StreamId, ToySourceSpec, TrainConfig,
};
use e2ec_cli::runs::{self, eval_seed};
use e2ec_cli::RunConfig;
use ndarray::{s, Array2};

const MAIN_STEPS: u64 = 50_000;
const TREND_STEPS: u64 = 10_000;
const SMOKE_STEPS: u64 = 500;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn toy() -> ToySourceSpec {
    ToySourceSpec::new(
        vec![vec![0.3, 0.2], vec![0.15, 0.35]],
        vec![vec![1.0, -0.4], vec![-0.6, 0.9]],
    )
    .unwrap()
}

fn jitter(model: &mut Model, groups: &[ParamGroup], scale: f64, rng: &mut RngStream) {
    for g in groups {
        let p = g.params_mut(model);
        for i in 0..p.num_params() {
            let v = p.get_flat(i);
            p.set_flat(i, v + scale * (rng.uniform() - 0.5));
        }
    }
}

fn tiny_model(
    max_length: usize,
    dim: usize,
    hidden: Vec<usize>,
    inputs: usize,
    classes: usize,
    seed: u64,
) -> Model {
    let cfg = TrainConfig {
        max_length,
        embedding_dim: dim,
        hidden,
        seed,
        ..TrainConfig::default()
    };
    Model::new(&cfg, inputs, classes).unwrap()
}

// 1

fn unbiasedness() -> Result<Verdict> {
    const BATCHES: usize = 100_000;
    let spec = toy();
    let mut model = tiny_model(2, 2, vec![], 2, 2, 11);
    jitter(
        &mut model,
        &ParamGroup::ALL,
        1.0,
        &mut RngStream::new(12, StreamId::Custom(3)),
    );
    let channel = BinarySymmetricChannel::new(0.15)?;
    let mut streams = SamplingStreams::new(5);
    let data = spec.sample(BATCHES, &mut RngStream::new(5, StreamId::Custom(1)));

    let nt = model.encoder.length_net.num_params();
    let nx = model.encoder.content_net.num_params();
    let (mut sum, mut sq) = (vec![0.0; nt + nx], vec![0.0; nt + nx]);
    for j in 0..BATCHES {
        let row = data.inputs.slice(s![j..j + 1, ..]);
        let b = collect_batch(
            &model,
            row,
            &data.labels[j..j + 1],
            &[j],
            &channel,
            &mut streams,
        )?;
        let mut g = policy_gradient_theta(&b, &model.encoder, 0.0)?.flat();
        g.extend(policy_gradient_xi(&b, &model.encoder, 0.0, true)?.flat());
        for (i, v) in g.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mut exact = exact_gradient(&spec, &model, ParamGroup::Length, 0.15, 0.0, 1e-6)?;
    exact.extend(exact_gradient(
        &spec,
        &model,
        ParamGroup::Content,
        0.15,
        0.0,
        1e-6,
    )?);

    let n = BATCHES as f64;
    let mut worst = 0.0f64;
    for (i, e) in exact.iter().enumerate() {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        worst = worst.max((mean - e).abs() / se.max(f64::MIN_POSITIVE));
    }
    verdict(
        worst <= 3.0,
        format!(
            "{} coordinates, {BATCHES} batches, worst |mean - exact| = {worst:.2} SE",
            exact.len()
        ),
    )
}

// 2

fn backprop() -> Result<Verdict> {
    const STEP: f64 = 1e-5;
    let mut rng = RngStream::new(2, StreamId::Custom(7));
    let (mut worst_dec, mut worst_rate) = (0.0f64, 0.0f64);
    for trial in 0..20u64 {
        let r_max = 1 + rng.below(8);
        let dim = 1 + rng.below(5);
        let hidden = match rng.below(3) {
            0 => vec![],
            1 => vec![3 + rng.below(4)],
            _ => vec![3 + rng.below(4), 3 + rng.below(3)],
        };
        let (inputs, classes, n) = (1 + rng.below(4), 2 + rng.below(4), 2 + rng.below(6));
        let mut model = tiny_model(r_max, dim, hidden, inputs, classes, 100 + trial);
        jitter(&mut model, &ParamGroup::ALL, 0.5, &mut rng);
        let x = Array2::from_shape_fn((n, inputs), |_| 2.0 * rng.uniform() - 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let indices: Vec<usize> = (0..n).collect();
        let channel = BinarySymmetricChannel::new(0.2)?;
        let batch = collect_batch(
            &model,
            x.view(),
            &labels,
            &indices,
            &channel,
            &mut SamplingStreams::new(trial),
        )?;
        let received: Vec<_> = batch.records.iter().map(|r| r.received).collect();

        let distortion = |m: &Model| -> f64 {
            let d = m.decoder.forward_batch(&received).unwrap();
            -d.label_log_probs(&labels).iter().sum::<f64>() / n as f64
        };
        let rate = |m: &Model| -> f64 {
            let p = m.encoder.length_probs(x.view()).unwrap();
            p.rows()
                .into_iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(k, v)| (k + 1) as f64 * v)
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64
        };
        let fd = |m: &Model, group: ParamGroup, f: &dyn Fn(&Model) -> f64| -> Vec<f64> {
            let mut probe = m.clone();
            (0..group.params(m).num_params())
                .map(|i| {
                    let v = group.params(&probe).get_flat(i);
                    group.params_mut(&mut probe).set_flat(i, v + STEP);
                    let up = f(&probe);
                    group.params_mut(&mut probe).set_flat(i, v - STEP);
                    let down = f(&probe);
                    group.params_mut(&mut probe).set_flat(i, v);
                    (up - down) / (2.0 * STEP)
                })
                .collect()
        };

        let (emb, cls) = decoder_gradient(&batch, &model.decoder)?;
        let pairs = [
            (emb.flat(), fd(&model, ParamGroup::Embedding, &distortion)),
            (cls.flat(), fd(&model, ParamGroup::Classifier, &distortion)),
        ];
        for (a, b) in &pairs {
            for (u, v) in a.iter().zip(b) {
                worst_dec = worst_dec.max(rel_err(*u, *v));
            }
        }
        let analytic = rate_gradient(&batch, &model.encoder)?.flat();
        for (u, v) in analytic.iter().zip(fd(&model, ParamGroup::Length, &rate)) {
            worst_rate = worst_rate.max(rel_err(*u, v));
        }
    }
    verdict(
        worst_dec <= 1e-4 && worst_rate <= 1e-6,
        format!("20 configs, worst rel err decoder {worst_dec:.2e}, rate {worst_rate:.2e}"),
    )
}

// 3

fn variational_bound() -> Result<Verdict> {
    let spec = ToySourceSpec::new(
        vec![vec![0.2, 0.1], vec![0.05, 0.25], vec![0.3, 0.1]],
        vec![vec![1.0, -0.4], vec![-0.6, 0.9], vec![0.2, 0.3]],
    )?;
    let mut base = tiny_model(3, 3, vec![4], 2, 2, 31);
    let mut rng = RngStream::new(31, StreamId::Custom(2));
    jitter(
        &mut base,
        &[ParamGroup::Length, ParamGroup::Content],
        2.0,
        &mut rng,
    );
    let joint = enumerate_joint(&spec, &base.encoder, &BinarySymmetricChannel::new(0.1)?)?;
    let index = |out: &e2ec::ChannelOutput| joint.outputs().iter().position(|o| o == out).unwrap();

    let exact = joint.bound(|out| Ok(joint.posterior(index(out)).unwrap_or(vec![0.5, 0.5])))?;
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for trial in 0..100u64 {
        let mut m = tiny_model(
            3,
            2 + rng.below(3),
            vec![2 + rng.below(4)],
            2,
            2,
            1000 + trial,
        );
        jitter(
            &mut m,
            &[ParamGroup::Classifier, ParamGroup::Embedding],
            3.0,
            &mut rng,
        );
        let b = joint.bound(|out| Ok(m.decoder.posterior(out)?.probs))?;
        if b.semantic_distortion > b.cross_entropy || b.gap() < exact.gap() {
            violations += 1;
        }
        min_gap = min_gap.min(b.gap());
    }
    verdict(
        violations == 0 && exact.kl.abs() <= 1e-9,
        format!(
            "{violations} violations over 100 decoders; exact-posterior KL {:.1e}, gap {:.4} vs smallest random gap {min_gap:.4}",
            exact.kl, exact.gap()
        ),
    )
}

// 4

fn truncation_law() -> Result<Verdict> {
    const SAMPLES: usize = 100_000;
    const R: usize = 3;
    let mut m = tiny_model(R, 2, vec![4], 2, 2, 41);
    jitter(
        &mut m,
        &[ParamGroup::Length, ParamGroup::Content],
        2.0,
        &mut RngStream::new(41, StreamId::Custom(4)),
    );
    let offset = |l: usize| (1usize << l) - 2;
    let mut worst = 0.0f64;
    for (xi, x) in [[0.7, -0.3], [-1.2, 0.4]].iter().enumerate() {
        let xv = Array2::from_shape_vec((1, 2), x.to_vec())?;
        let pl = m.encoder.length_probs(xv.view())?;
        let pb = m.encoder.bit_probs(xv.view())?;
        let mut exact = vec![0.0; offset(R + 1)];
        for l in 1..=R {
            for w in 0u64..1 << R {
                let pz: f64 = (0..R)
                    .map(|i| {
                        if (w >> i) & 1 == 1 {
                            pb[[0, i]]
                        } else {
                            1.0 - pb[[0, i]]
                        }
                    })
                    .product();
                let z = truncate(ContentBits::new(w, R), l)?;
                exact[offset(l) + z.word() as usize] += pl[[0, l - 1]] * pz;
            }
        }
        let mut counts = vec![0usize; exact.len()];
        let mut lr = RngStream::new(xi as u64, StreamId::Length);
        let mut cr = RngStream::new(xi as u64, StreamId::Content);
        for _ in 0..SAMPLES {
            let e = m.encoder.encode(x, &mut lr, &mut cr)?;
            counts[offset(e.length) + e.codeword.word() as usize] += 1;
        }
        let tv = 0.5
            * exact
                .iter()
                .zip(&counts)
                .map(|(p, c)| (p - *c as f64 / SAMPLES as f64).abs())
                .sum::<f64>();
        worst = worst.max(tv);
    }
    verdict(
        worst < 0.01,
        format!("R_max 3, 2 inputs, {SAMPLES} samples each, worst TV {worst:.4}"),
    )
}

// 5

fn channel_stats() -> Result<Verdict> {
    const TRANSMISSIONS: usize = 100_000;
    const LEN: usize = 16;
    let mut notes = Vec::new();
    let mut pass = true;
    let code = Codeword::new(0xA5C3, LEN, 64)?;
    for (k, &p) in [0.001, 0.01, 0.1, 0.2].iter().enumerate() {
        let ch = BinarySymmetricChannel::new(p)?;
        let mut rng = RngStream::new(k as u64, StreamId::Channel);
        let mut flips = 0u64;
        for _ in 0..TRANSMISSIONS {
            flips += (ch.transmit(&code, &mut rng).word() ^ code.word()).count_ones() as u64;
        }
        let n = (TRANSMISSIONS * LEN) as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        let z = (flips as f64 - n * p) / sigma;
        pass &= z.abs() <= 3.0;
        notes.push(format!("p_e {p}: {z:+.2} sigma"));
    }
    let mut worst = 0.0f64;
    for l in 1..=10 {
        for sent in [0u64, (1 << l) - 1, 0b10_1101_1001 & ((1 << l) - 1)] {
            let code = Codeword::new(sent, l, 64)?;
            for p in [0.0, 0.001, 0.1, 0.5, 0.9] {
                let cfg = ChannelConfig::new(p)?;
                let total: f64 = (0u64..1 << l)
                    .map(|w| {
                        channel_law(&code, &e2ec::ChannelOutput::new(w, l, 64).unwrap(), cfg)
                            .unwrap()
                    })
                    .sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    pass &= worst <= 1e-12;
    verdict(
        pass,
        format!("{}; law mass error {worst:.1e}", notes.join(", ")),
    )
}

// MNIST runs

struct Mnist {
    train: LabeledDataset,
    test: LabeledDataset,
    dir: PathBuf,
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("E2EC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

fn load_mnist() -> Result<Mnist> {
    let dir = mnist_dir();
    let cfg = RunConfig {
        data_dir: dir.clone(),
        ..RunConfig::default()
    };
    Ok(Mnist {
        train: runs::load_split(&cfg, Split::Train)?,
        test: runs::load_split(&cfg, Split::Test)?,
        dir,
    })
}

fn run_config(data: &Mnist, out: &Path, lambda: f64, pe: f64, steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        data_dir: data.dir.clone(),
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.train.max_length = 16;
    cfg.train.embedding_dim = 64;
    cfg.train.lambda = lambda;
    cfg.train.flip_probability = pe;
    cfg.train.max_steps = steps;
    cfg.log_interval = 500;
    cfg
}

struct Trained {
    lambda: f64,
    pe: f64,
    model: Model,
    test: EvalSummary,
}

fn train_and_test(data: &Mnist, cfg: &RunConfig) -> Result<Trained> {
    let started = Instant::now();
    let out = runs::train(cfg, &data.train, None)?;
    let tc = cfg.resolved_train();
    let channel = BinarySymmetricChannel::new(tc.flip_probability)?;
    let test = evaluate(
        &out.model,
        &data.test,
        &channel,
        eval_seed(tc.seed, 0),
        None,
    )?;
    println!(
        "    trained lambda {} p_e {} for {} steps in {:.0}s: test R {:.3} acc {:.4} Var(L) {:.3}",
        tc.lambda,
        tc.flip_probability,
        tc.max_steps,
        started.elapsed().as_secs_f64(),
        test.rate,
        test.accuracy,
        test.length_variance
    );
    Ok(Trained {
        lambda: tc.lambda,
        pe: tc.flip_probability,
        model: out.model,
        test,
    })
}

fn mnist_accuracy(main: &Trained) -> Result<Verdict> {
    let t = &main.test;
    verdict(
        t.accuracy >= 0.93 && t.rate <= 16.0,
        format!(
            "{MAIN_STEPS} steps: test acc {:.4}, R {:.3} bits over {} items",
            t.accuracy, t.rate, t.count
        ),
    )
}

fn trends(base: &Trained, low_noise: &Trained, mid: &Trained, high: &Trained) -> Result<Verdict> {
    let noise = low_noise.test.rate < base.test.rate;
    let lambda = base.test.rate >= mid.test.rate && mid.test.rate >= high.test.rate;
    verdict(
        noise && lambda,
        format!(
            "{TREND_STEPS} steps each: R(p_e {})={:.3} vs R(p_e {})={:.3}; R over lambda {}/{}/{} = {:.3}/{:.3}/{:.3}",
            low_noise.pe,
            low_noise.test.rate,
            base.pe,
            base.test.rate,
            base.lambda,
            mid.lambda,
            high.lambda,
            base.test.rate,
            mid.test.rate,
            high.test.rate
        ),
    )
}

fn variable_length(models: &[&Trained], test_len: usize) -> Result<Verdict> {
    let mut pass = test_len == 10_000;
    let mut notes = Vec::new();
    for t in models {
        let total: usize = t.test.length_histogram.iter().sum();
        pass &= t.test.length_variance > 0.0 && total == test_len;
        notes.push(format!(
            "lambda {} p_e {}: Var {:.3}, hist sum {total}",
            t.lambda, t.pe, t.test.length_variance
        ));
    }
    verdict(pass, notes.join("; "))
}

fn diagnostics(main: &Trained, data: &Mnist, dir: &Path) -> Result<Verdict> {
    let deltas = runs::write_ablation(
        &dir.join(runs::ABLATION_FILE),
        "acceptance",
        &main.model,
        &data.test,
        main.pe,
        0,
        4,
        5,
    )?;
    let first = deltas[0].1;
    let ablation = deltas[1..].iter().all(|(_, d)| first > *d);
    let (norms, _) =
        runs::write_embeddings(&dir.join(runs::EMBEDDINGS_FILE), "acceptance", &main.model)?;
    let block = norms.len() / 4;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (low, top) = (mean(&norms[..block]), mean(&norms[norms.len() - block..]));
    let fmt: Vec<String> = deltas.iter().map(|(_, d)| format!("{d:.3}")).collect();
    verdict(
        ablation && low > top,
        format!(
            "block delta D [{}]; mean |e1| bits 1-{block} {low:.3} vs last block {top:.3}",
            fmt.join(", ")
        ),
    )
}

fn determinism(data: &Mnist, root: &Path) -> Result<Verdict> {
    let mut streams = Vec::new();
    for k in 0..2 {
        let cfg = run_config(
            data,
            &root.join(format!("smoke{k}")),
            1e-6,
            0.1,
            SMOKE_STEPS,
        );
        let cfg = RunConfig {
            log_interval: 50,
            ..cfg
        };
        let out = runs::train(&cfg, &data.train, None)?;
        streams.push(std::fs::read(&out.metrics_path)?);
    }
    ensure!(!streams[0].is_empty(), "empty metrics stream");
    verdict(
        streams[0] == streams[1],
        format!(
            "{SMOKE_STEPS}-step runs, metrics streams of {} and {} bytes",
            streams[0].len(),
            streams[1].len()
        ),
    )
}

// harness

fn selected(id: u32) -> bool {
    match std::env::var("E2EC_ACCEPT_ONLY") {
        Ok(list) => list.split(',').any(|t| t.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn check(id: u32, name: &str, results: &mut Vec<bool>, f: impl FnOnce() -> Result<Verdict>) {
    if !selected(id) {
        return;
    }
    let started = Instant::now();
    let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => (v.pass, v.detail),
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(_) => (false, "panicked".into()),
    };
    println!(
        "{} criterion {id:>2} {name} ({:.1}s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    results.push(pass);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    check(1, "estimator unbiasedness", &mut results, unbiasedness);
    check(2, "backprop correctness", &mut results, backprop);
    check(3, "variational bound", &mut results, variational_bound);
    check(4, "truncation factorization", &mut results, truncation_law);
    check(5, "channel statistics", &mut results, channel_stats);

    let scratch = tempfile::tempdir().expect("temporary directory");
    let kept = std::env::var_os("E2EC_ACCEPT_DIR").map(PathBuf::from);
    let root = kept.as_deref().unwrap_or(scratch.path());
    let needs_data = (6..=10).any(selected);
    let loaded = if needs_data {
        load_mnist().context("loading MNIST (set E2EC_MNIST_DIR)")
    } else {
        Err(anyhow::anyhow!("not needed"))
    };
    match loaded {
        Err(_) if !needs_data => {}
        Err(e) => {
            for (id, name) in [
                (6, "MNIST accuracy and rate"),
                (7, "rate trends"),
                (8, "variable length"),
                (9, "ablation and embedding diagnostics"),
                (10, "determinism"),
            ] {
                check(id, name, &mut results, || Err(anyhow::anyhow!("{e:#}")));
            }
        }
        Ok(data) => {
            let main = if [6, 8, 9].iter().any(|&i| selected(i)) {
                train_and_test(
                    &data,
                    &run_config(&data, &root.join("main"), 1e-6, 0.1, MAIN_STEPS),
                )
            } else {
                Err(anyhow::anyhow!("not trained"))
            };
            match &main {
                Ok(m) => check(6, "MNIST accuracy and rate", &mut results, || mnist_accuracy(m)),
                Err(e) => check(6, "MNIST accuracy and rate", &mut results, || {
                    Err(anyhow::anyhow!("{e:#}"))
                }),
            }
            let trend: Result<Vec<Trained>> = if !(selected(7) || selected(8)) {
                Err(anyhow::anyhow!("not trained"))
            } else {
                [(1e-6, 0.1), (1e-6, 0.001), (1e-4, 0.1), (1e-2, 0.1)]
                    .iter()
                    .enumerate()
                    .map(|(k, &(lambda, pe))| {
                        train_and_test(
                            &data,
                            &run_config(
                                &data,
                                &root.join(format!("trend{k}")),
                                lambda,
                                pe,
                                TREND_STEPS,
                            ),
                        )
                    })
                    .collect()
            };
            check(7, "rate trends", &mut results, || {
                let t = trend.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
                trends(&t[0], &t[1], &t[2], &t[3])
            });
            check(8, "variable length", &mut results, || {
                let m = main.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
                let t = trend.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
                let all: Vec<&Trained> = std::iter::once(m).chain(t.iter()).collect();
                variable_length(&all, data.test.len())
            });
            check(
                9,
                "ablation and embedding diagnostics",
                &mut results,
                || {
                    let m = main.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
                    diagnostics(m, &data, root)
                },
            );
            check(10, "determinism", &mut results, || determinism(&data, root));
        }
    }

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
