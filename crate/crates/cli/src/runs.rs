//! The work behind each subcommand, callable without going through argv.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use e2ec::checkpoint;
use e2ec::eval::{ablate_blocks, evaluate, EvalSummary};
use e2ec::{
    load_mnist, BinarySymmetricChannel, LabeledDataset, MetricsRecord, Model, Split, Trainer,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::stats::{interval, Interval};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CURVE_FILE: &str = "rd_curve.csv";

/// Seed for the `k`-th evaluation pass; disjoint from the training streams' seed.
pub fn eval_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(1_000_000).wrapping_add(k as u64)
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<LabeledDataset> {
    let data = load_mnist(&cfg.data_dir, split)
        .with_context(|| format!("loading MNIST from {}", cfg.data_dir.display()))?;
    let limit = match split {
        Split::Train => cfg.train_subset,
        Split::Test => 0,
    };
    Ok(if limit > 0 { data.head(limit) } else { data })
}

#[derive(Serialize)]
struct Logged<'a> {
    config_hash: &'a str,
    split: &'a str,
    #[serde(flatten)]
    metrics: &'a MetricsRecord,
}

fn record_from_eval(step: u64, lambda: f64, s: &EvalSummary) -> MetricsRecord {
    MetricsRecord {
        step,
        distortion: s.distortion,
        rate: s.rate,
        lagrangian: s.distortion + lambda * s.rate,
        accuracy: s.accuracy,
        length_variance: s.length_variance,
        length_histogram: s.length_histogram.clone(),
    }
}

/// Running means of the per-step metrics between two log lines.
#[derive(Default)]
struct Window {
    steps: u64,
    d: f64,
    r: f64,
    acc: f64,
    var: f64,
    hist: Vec<usize>,
}

impl Window {
    fn add(&mut self, m: &MetricsRecord) {
        if self.hist.is_empty() {
            self.hist = vec![0; m.length_histogram.len()];
        }
        self.steps += 1;
        self.d += m.distortion;
        self.r += m.rate;
        self.acc += m.accuracy;
        self.var += m.length_variance;
        for (h, c) in self.hist.iter_mut().zip(&m.length_histogram) {
            *h += c;
        }
    }

    fn flush(&mut self, step: u64, lambda: f64) -> MetricsRecord {
        let n = self.steps as f64;
        let (d, r) = (self.d / n, self.r / n);
        let rec = MetricsRecord {
            step,
            distortion: d,
            rate: r,
            lagrangian: d + lambda * r,
            accuracy: self.acc / n,
            length_variance: self.var / n,
            length_histogram: std::mem::take(&mut self.hist),
        };
        *self = Window::default();
        rec
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains on `train`, logging to `<out_dir>/metrics.jsonl` and saving `<out_dir>/model.ckpt`.
pub fn train(
    cfg: &RunConfig,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let tc = cfg.resolved_train();
    let hash = cfg.hash();
    let channel = BinarySymmetricChannel::new(tc.flip_probability)?;
    // held-out checks use the configured channel even when training runs noiseless
    let eval_channel = BinarySymmetricChannel::new(cfg.train.flip_probability)?;
    let mut trainer = Trainer::new(tc.clone(), train.dim(), train.num_classes)?;

    let probe = match test {
        Some(t) if cfg.eval_interval > 0 && cfg.eval_subset > 0 => Some(t.head(cfg.eval_subset)),
        Some(t) if cfg.eval_interval > 0 => Some(t.clone()),
        _ => None,
    };
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut out = BufWriter::new(File::create(&metrics_path)?);
    let mut records = Vec::new();
    let mut window = Window::default();
    for step in 1..=tc.max_steps {
        let m = trainer
            .step(train, &channel)
            .with_context(|| format!("training step {step}"))?;
        window.add(&m);
        if step % cfg.log_interval == 0 || step == tc.max_steps {
            let rec = window.flush(step, tc.lambda);
            serde_json::to_writer(
                &mut out,
                &Logged {
                    config_hash: &hash,
                    split: "train",
                    metrics: &rec,
                },
            )?;
            out.write_all(b"\n")?;
            records.push(rec);
        }
        if let Some(p) = &probe {
            if step % cfg.eval_interval == 0 {
                let s = evaluate(
                    &trainer.model,
                    p,
                    &eval_channel,
                    eval_seed(tc.seed, 0),
                    None,
                )?;
                let rec = record_from_eval(step, tc.lambda, &s);
                serde_json::to_writer(
                    &mut out,
                    &Logged {
                        config_hash: &hash,
                        split: "test",
                        metrics: &rec,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    let checkpoint_path = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&checkpoint_path, &trainer.model, &cfg.canonical())?;
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        metrics_path,
        checkpoint_path,
    })
}

/// Loads a checkpoint; its stored config is checked against `expected` when given.
pub fn load_checkpoint(path: &Path, expected: Option<&RunConfig>) -> Result<(Model, RunConfig)> {
    let (model, meta) =
        checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stored = RunConfig::parse(&meta).context("checkpoint carries an unreadable config")?;
    if let Some(cfg) = expected {
        let (a, b) = (stored.resolved_train(), cfg.resolved_train());
        let mut diffs = Vec::new();
        if a.max_length != b.max_length {
            diffs.push(format!("r_max {} vs {}", a.max_length, b.max_length));
        }
        if a.embedding_dim != b.embedding_dim {
            diffs.push(format!("d {} vs {}", a.embedding_dim, b.embedding_dim));
        }
        if a.hidden != b.hidden {
            diffs.push(format!("hidden {:?} vs {:?}", a.hidden, b.hidden));
        }
        if a.length_mode != b.length_mode {
            diffs.push(format!(
                "length mode {:?} vs {:?}",
                a.length_mode, b.length_mode
            ));
        }
        if a.sum_all_positions != b.sum_all_positions {
            diffs.push("sum_all_positions".into());
        }
        if !diffs.is_empty() {
            bail!("checkpoint does not match config: {}", diffs.join(", "));
        }
    }
    Ok((model, stored))
}

pub struct EvalReport {
    pub passes: Vec<EvalSummary>,
    pub distortion: Interval,
    pub rate: Interval,
    pub accuracy: Interval,
    pub length_variance: Interval,
    pub histogram: Vec<Interval>,
}

/// `repetitions` independent passes over `data`, each with its own sampling and channel seed.
pub fn eval(
    model: &Model,
    data: &LabeledDataset,
    flip_probability: f64,
    seed: u64,
    repetitions: usize,
    confidence: f64,
) -> Result<EvalReport> {
    let channel = BinarySymmetricChannel::new(flip_probability)?;
    let passes = (0..repetitions)
        .map(|k| evaluate(model, data, &channel, eval_seed(seed, k), None).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&EvalSummary) -> f64| -> Interval {
        interval(&passes.iter().map(f).collect::<Vec<_>>(), confidence)
    };
    let bins = passes[0].length_histogram.len();
    Ok(EvalReport {
        distortion: col(&|s| s.distortion),
        rate: col(&|s| s.rate),
        accuracy: col(&|s| s.accuracy),
        length_variance: col(&|s| s.length_variance),
        histogram: (0..bins)
            .map(|b| col(&|s| s.length_histogram[b] as f64))
            .collect(),
        passes,
    })
}

fn csv_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write_summary(
    path: &Path,
    hash: &str,
    split: &str,
    flip: f64,
    r: &EvalReport,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "config_hash,split,p_e,metric,mean,ci_low,ci_high,n")?;
    let mut row = |name: &str, iv: &Interval| {
        writeln!(
            w,
            "{hash},{split},{flip},{name},{},{},{},{}",
            csv_f(iv.mean),
            csv_f(iv.low()),
            csv_f(iv.high()),
            iv.n
        )
    };
    row("D", &r.distortion)?;
    row("R", &r.rate)?;
    row("acc", &r.accuracy)?;
    row("var_len", &r.length_variance)?;
    for (l, iv) in r.histogram.iter().enumerate() {
        row(&format!("hist_len_{}", l + 1), iv)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-block ablation averaged over `repetitions` seeded passes; returns `(block, mean delta D)`.
#[allow(clippy::too_many_arguments)]
pub fn write_ablation(
    path: &Path,
    hash: &str,
    model: &Model,
    data: &LabeledDataset,
    flip: f64,
    seed: u64,
    blocks: usize,
    repetitions: usize,
) -> Result<Vec<(usize, f64)>> {
    ensure!(repetitions > 0, "ablation needs at least one repetition");
    let channel = BinarySymmetricChannel::new(flip)?;
    let everything = Some(0..model.max_length());
    // columns: D, delta D, accuracy; row 0 is the unablated pass, the last row ablates every bit
    let mut sums: Vec<[f64; 3]> = Vec::new();
    let mut bits = Vec::new();
    for k in 0..repetitions {
        let s = eval_seed(seed, k);
        let (reference, rows) = ablate_blocks(model, data, &channel, s, blocks)?;
        let all = evaluate(model, data, &channel, s, everything.clone())?;
        let mut pass = vec![[reference.distortion, 0.0, reference.accuracy]];
        pass.extend(
            rows.iter()
                .map(|r| [r.distortion, r.delta_distortion, r.accuracy]),
        );
        pass.push([
            all.distortion,
            all.distortion - reference.distortion,
            all.accuracy,
        ]);
        if sums.is_empty() {
            sums = vec![[0.0; 3]; pass.len()];
            bits = rows.iter().map(|r| r.bits.clone()).collect();
        }
        for (acc, row) in sums.iter_mut().zip(&pass) {
            for c in 0..3 {
                acc[c] += row[c] / repetitions as f64;
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "config_hash,block,bit_start,bit_end,D,delta_D,acc,passes"
    )?;
    let last = sums.len() - 1;
    for (i, [d, delta, acc]) in sums.iter().enumerate() {
        let (name, lo, hi) = match i {
            0 => ("none".to_string(), 0, 0),
            i if i == last => ("all".to_string(), 0, model.max_length()),
            i => ((i - 1).to_string(), bits[i - 1].start, bits[i - 1].end),
        };
        writeln!(w, "{hash},{name},{lo},{hi},{d},{delta},{acc},{repetitions}")?;
    }
    w.flush()?;
    Ok((0..bits.len()).map(|b| (b, sums[b + 1][1])).collect())
}

pub fn write_embeddings(path: &Path, hash: &str, model: &Model) -> Result<(Vec<f64>, f64)> {
    let table = &model.decoder.table;
    let norms = table.one_norms();
    let cross = table.max_cross_inner_product();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "config_hash,bit,e1_norm,max_cross_inner_product")?;
    for (i, n) in norms.iter().enumerate() {
        writeln!(w, "{hash},{},{n},{cross}", i + 1)?;
    }
    w.flush()?;
    Ok((norms, cross))
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub lambda: f64,
    pub flip_probability: f64,
    pub max_length: usize,
    /// `None` when any repetition failed.
    pub rate: Option<Interval>,
    pub accuracy: Option<Interval>,
    pub distortion: Option<Interval>,
    pub error: Option<String>,
}

/// Trains and evaluates every grid cell; failed cells are recorded and skipped.
pub fn sweep(
    cfg: &RunConfig,
    train_data: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Vec<SweepCell>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let spec = &cfg.sweep;
    let mut cells = Vec::new();
    for (k, (lambda, pe, r_max)) in spec.cells().into_iter().enumerate() {
        let mut per_rep = Vec::new();
        let mut error = None;
        for rep in 0..spec.repetitions {
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.lambda = lambda;
            cell_cfg.train.flip_probability = pe;
            cell_cfg.train.max_length = r_max;
            cell_cfg.train.seed = cfg.train.seed + rep as u64;
            cell_cfg.run_id = format!("{}-cell{k}-rep{rep}", cfg.run_id);
            cell_cfg.out_dir = cfg
                .out_dir
                .join(format!("cell{k}"))
                .join(format!("rep{rep}"));
            let result = (|| -> Result<EvalReport> {
                let outcome = train(&cell_cfg, train_data, Some(test))?;
                let tc = cell_cfg.resolved_train();
                let report = eval(
                    &outcome.model,
                    test,
                    cell_cfg.train.flip_probability,
                    tc.seed,
                    cell_cfg.eval_repetitions,
                    cell_cfg.confidence,
                )?;
                write_summary(
                    &cell_cfg.out_dir.join(SUMMARY_FILE),
                    &cell_cfg.hash(),
                    "test",
                    cell_cfg.train.flip_probability,
                    &report,
                )?;
                Ok(report)
            })();
            match result {
                Ok(report) => per_rep.push(report),
                Err(e) => {
                    error = Some(format!("{e:#}"));
                    break;
                }
            }
        }
        let summarize = |f: &dyn Fn(&EvalReport) -> f64| {
            if error.is_some() {
                None
            } else {
                Some(interval(
                    &per_rep.iter().map(f).collect::<Vec<_>>(),
                    spec.confidence,
                ))
            }
        };
        cells.push(SweepCell {
            lambda,
            flip_probability: pe,
            max_length: r_max,
            rate: summarize(&|r| r.rate.mean),
            accuracy: summarize(&|r| r.accuracy.mean),
            distortion: summarize(&|r| r.distortion.mean),
            error,
        });
    }
    write_sweep(&cfg.out_dir, &cfg.hash(), &cells)?;
    Ok(cells)
}

fn write_sweep(dir: &Path, hash: &str, cells: &[SweepCell]) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(SWEEP_FILE))?);
    writeln!(
        w,
        "config_hash,lambda,p_e,r_max,status,R_mean,R_ci,acc_mean,acc_ci,D_mean,D_ci"
    )?;
    for c in cells {
        match (&c.rate, &c.accuracy, &c.distortion) {
            (Some(r), Some(a), Some(d)) => writeln!(
                w,
                "{hash},{},{},{},ok,{},{},{},{},{},{}",
                c.lambda,
                c.flip_probability,
                c.max_length,
                r.mean,
                csv_f(r.half_width),
                a.mean,
                csv_f(a.half_width),
                d.mean,
                csv_f(d.half_width)
            )?,
            _ => writeln!(
                w,
                "{hash},{},{},{},failed,,,,,,",
                c.lambda, c.flip_probability, c.max_length
            )?,
        }
    }
    w.flush()?;

    // rate-distortion pairs grouped by channel and code budget, ordered by lambda
    let mut w = BufWriter::new(File::create(dir.join(CURVE_FILE))?);
    writeln!(w, "config_hash,p_e,r_max,lambda,R,D")?;
    let mut ok: Vec<&SweepCell> = cells.iter().filter(|c| c.rate.is_some()).collect();
    ok.sort_by(|a, b| {
        (a.flip_probability, a.max_length, a.lambda)
            .partial_cmp(&(b.flip_probability, b.max_length, b.lambda))
            .expect("finite grid values")
    });
    for c in ok {
        writeln!(
            w,
            "{hash},{},{},{},{},{}",
            c.flip_probability,
            c.max_length,
            c.lambda,
            c.rate.expect("filtered").mean,
            c.distortion.expect("filtered").mean
        )?;
    }
    w.flush()?;
    Ok(())
}
