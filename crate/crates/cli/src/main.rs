use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use e2ec::Split;
use e2ec_cli::runs::{self, ABLATION_FILE, CHECKPOINT_FILE, EMBEDDINGS_FILE, SUMMARY_FILE};
use e2ec_cli::{Mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "e2ec",
    version,
    about = "Variable-length semantic JSCC experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// e2ec, fixed-length-baseline or noiseless-proxy.
    #[arg(long)]
    mode: Option<Mode>,
    /// BSC flip probability.
    #[arg(long)]
    pe: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rmax: Option<usize>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and model.ckpt.
    Train(Common),
    /// Evaluate a checkpoint over repeated channel draws; writes summary.csv.
    Eval {
        #[command(flatten)]
        args: CheckpointArgs,
        /// train or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Distortion increase from randomizing each bit block; writes ablation.csv.
    AblateBits {
        #[command(flatten)]
        args: CheckpointArgs,
        #[arg(long)]
        blocks: Option<usize>,
    },
    /// Per-bit embedding norms and the cross-embedding diagnostic; writes embeddings.csv.
    EmbeddingReport(CheckpointArgs),
    /// Train and evaluate every cell of the configured grid; writes sweep.csv and rd_curve.csv.
    Sweep(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = c.mode {
        cfg.mode = v;
    }
    if let Some(v) = c.pe {
        cfg.train.flip_probability = v;
    }
    if let Some(v) = c.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = c.rmax {
        cfg.train.max_length = v;
    }
    if let Some(v) = &c.data {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = c.steps {
        cfg.train.max_steps = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint plus the config to run it under. With no `--config`, the stored one is used.
fn open_checkpoint(a: &CheckpointArgs) -> Result<(e2ec::Model, RunConfig)> {
    let given = a.common.config.is_some();
    let cfg = resolve(&a.common)?;
    let path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let (model, stored) = runs::load_checkpoint(&path, given.then_some(&cfg))?;
    if given {
        return Ok((model, cfg));
    }
    // flags still override what the checkpoint recorded
    let mut merged = stored;
    if a.common.out.is_some() {
        merged.out_dir = cfg.out_dir;
    }
    if a.common.data.is_some() {
        merged.data_dir = cfg.data_dir;
    }
    if let Some(v) = a.common.pe {
        merged.train.flip_probability = v;
    }
    if let Some(v) = a.common.seed {
        merged.train.seed = v;
    }
    Ok((model, merged))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let train = runs::load_split(&cfg, Split::Train)?;
            let test = if cfg.eval_interval > 0 {
                Some(runs::load_split(&cfg, Split::Test)?)
            } else {
                None
            };
            let out = runs::train(&cfg, &train, test.as_ref())?;
            if let Some(last) = out.records.last() {
                println!(
                    "step {} D {:.4} R {:.3} acc {:.4} -> {}",
                    last.step,
                    last.distortion,
                    last.rate,
                    last.accuracy,
                    out.checkpoint_path.display()
                );
            }
        }
        Command::Eval { args, split } => {
            let (model, cfg) = open_checkpoint(&args)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => anyhow::bail!("unknown split `{other}`"),
            };
            let data = runs::load_split(&cfg, split)?;
            let tc = cfg.resolved_train();
            let pe = args.common.pe.unwrap_or(cfg.train.flip_probability);
            let report = runs::eval(
                &model,
                &data,
                pe,
                tc.seed,
                cfg.eval_repetitions,
                cfg.confidence,
            )?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(SUMMARY_FILE);
            let name = if split == Split::Train {
                "train"
            } else {
                "test"
            };
            runs::write_summary(&path, &cfg.hash(), name, pe, &report)?;
            println!(
                "R {:.3} +- {:.3}  acc {:.4} +- {:.4}  D {:.4}  -> {}",
                report.rate.mean,
                report.rate.half_width,
                report.accuracy.mean,
                report.accuracy.half_width,
                report.distortion.mean,
                path.display()
            );
        }
        Command::AblateBits { args, blocks } => {
            let (model, cfg) = open_checkpoint(&args)?;
            let data = runs::load_split(&cfg, Split::Test)?;
            let tc = cfg.resolved_train();
            let pe = args.common.pe.unwrap_or(cfg.train.flip_probability);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(ABLATION_FILE);
            let blocks = blocks.unwrap_or(cfg.ablation_blocks);
            let rows = runs::write_ablation(
                &path,
                &cfg.hash(),
                &model,
                &data,
                pe,
                tc.seed,
                blocks,
                cfg.eval_repetitions,
            )?;
            for (b, delta) in rows {
                println!("block {b}: delta D {delta:.4}");
            }
        }
        Command::EmbeddingReport(args) => {
            let (model, cfg) = open_checkpoint(&args)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(EMBEDDINGS_FILE);
            let (_, cross) = runs::write_embeddings(&path, &cfg.hash(), &model)?;
            println!("max cross inner product {cross:.4} -> {}", path.display());
        }
        Command::Sweep(c) => {
            let cfg = resolve(&c)?;
            let train = runs::load_split(&cfg, Split::Train)?;
            let test = runs::load_split(&cfg, Split::Test)?;
            let cells = runs::sweep(&cfg, &train, &test).context("running sweep")?;
            for cell in cells {
                match (cell.rate, cell.accuracy) {
                    (Some(r), Some(a)) => println!(
                        "lambda {} p_e {} r_max {}: R {:.3} acc {:.4}",
                        cell.lambda, cell.flip_probability, cell.max_length, r.mean, a.mean
                    ),
                    _ => println!(
                        "lambda {} p_e {} r_max {}: failed: {}",
                        cell.lambda,
                        cell.flip_probability,
                        cell.max_length,
                        cell.error.unwrap_or_default()
                    ),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
