//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are rejected by name. Lists are comma separated.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use e2ec::{LengthMode, TrainConfig};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    E2ec,
    /// Length head pinned to a point mass at `fixed_length`.
    FixedLengthBaseline,
    /// Noiseless training channel; a stand-in for a continuous-latent baseline, not a reimplementation.
    NoiselessProxy,
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2ec" => Ok(Mode::E2ec),
            "fixed-length-baseline" => Ok(Mode::FixedLengthBaseline),
            "noiseless-proxy" => Ok(Mode::NoiselessProxy),
            other => bail!(
                "unknown mode `{other}` (expected e2ec, fixed-length-baseline or noiseless-proxy)"
            ),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::E2ec => "e2ec",
            Mode::FixedLengthBaseline => "fixed-length-baseline",
            Mode::NoiselessProxy => "noiseless-proxy",
        }
    }
}

/// Grid of trained cells for `sweep`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    pub flip_probabilities: Vec<f64>,
    pub max_lengths: Vec<usize>,
    pub repetitions: usize,
    pub confidence: f64,
}

impl SweepSpec {
    /// Every `(lambda, p_e, R_max)` combination, in that nesting order.
    pub fn cells(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &pe in &self.flip_probabilities {
                for &r in &self.max_lengths {
                    out.push((lambda, pe, r));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run_id: String,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub mode: Mode,
    /// Code length used by the fixed-length baseline; 0 means `r_max`.
    pub fixed_length: usize,
    pub log_interval: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_interval: u64,
    /// Test items used by the periodic evaluations; 0 means all.
    pub eval_subset: usize,
    pub eval_repetitions: usize,
    /// Training items used; 0 means all.
    pub train_subset: usize,
    pub ablation_blocks: usize,
    pub confidence: f64,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            run_id: "run".into(),
            out_dir: PathBuf::from("runs/run"),
            data_dir: PathBuf::from("data/mnist"),
            mode: Mode::E2ec,
            fixed_length: 0,
            log_interval: 100,
            eval_interval: 0,
            eval_subset: 0,
            eval_repetitions: 5,
            train_subset: 0,
            ablation_blocks: 4,
            confidence: 0.95,
            sweep: SweepSpec {
                lambdas: vec![1e-6],
                flip_probabilities: vec![0.1],
                max_lengths: vec![64],
                repetitions: 1,
                confidence: 0.95,
            },
        }
    }
}

/// Keys accepted in a config file, in canonical order.
pub const KEYS: &[&str] = &[
    "run_id",
    "out_dir",
    "data_dir",
    "mode",
    "fixed_length",
    "r_max",
    "d",
    "lambda",
    "p_e",
    "batch_size",
    "learning_rate",
    "max_steps",
    "seed",
    "baseline_decay",
    "hidden",
    "sum_all_positions",
    "prefix_content_score",
    "grad_clip",
    "log_interval",
    "eval_interval",
    "eval_subset",
    "eval_repetitions",
    "train_subset",
    "ablation_blocks",
    "confidence",
    "sweep_lambda",
    "sweep_pe",
    "sweep_rmax",
    "sweep_repetitions",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                unknown.push(key.to_string());
                continue;
            }
            cfg.set(key, value)
                .with_context(|| format!("line {}", n + 1))?;
        }
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "run_id" => self.run_id = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "mode" => self.mode = value.parse()?,
            "fixed_length" => self.fixed_length = parse(key, value)?,
            "r_max" => t.max_length = parse(key, value)?,
            "d" => t.embedding_dim = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "p_e" => t.flip_probability = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "baseline_decay" => {
                t.baseline_decay = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "hidden" => t.hidden = parse_list(key, value)?,
            "sum_all_positions" => t.sum_all_positions = parse(key, value)?,
            "prefix_content_score" => t.prefix_content_score = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_subset" => self.eval_subset = parse(key, value)?,
            "eval_repetitions" => self.eval_repetitions = parse(key, value)?,
            "train_subset" => self.train_subset = parse(key, value)?,
            "ablation_blocks" => self.ablation_blocks = parse(key, value)?,
            "confidence" => {
                self.confidence = parse(key, value)?;
                self.sweep.confidence = self.confidence;
            }
            "sweep_lambda" => self.sweep.lambdas = parse_list(key, value)?,
            "sweep_pe" => self.sweep.flip_probabilities = parse_list(key, value)?,
            "sweep_rmax" => self.sweep.max_lengths = parse_list(key, value)?,
            "sweep_repetitions" => self.sweep.repetitions = parse(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_train().validate().map_err(|e| anyhow!(e))?;
        if self.log_interval == 0 {
            bail!("log_interval must be at least 1");
        }
        if self.eval_repetitions == 0 || self.sweep.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            bail!("confidence must lie in (0, 1)");
        }
        if self.fixed_length > self.train.max_length {
            bail!(
                "fixed_length {} exceeds r_max {}",
                self.fixed_length,
                self.train.max_length
            );
        }
        let s = &self.sweep;
        if s.lambdas.is_empty() || s.flip_probabilities.is_empty() || s.max_lengths.is_empty() {
            bail!("sweep grid must be nonempty");
        }
        Ok(())
    }

    /// Training configuration with the mode applied.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        match self.mode {
            Mode::E2ec => {}
            Mode::FixedLengthBaseline => {
                let l = if self.fixed_length == 0 {
                    t.max_length
                } else {
                    self.fixed_length
                };
                t.length_mode = LengthMode::Fixed(l);
            }
            Mode::NoiselessProxy => t.flip_probability = 0.0,
        }
        t
    }

    /// Canonical `key = value` text, one line per key in [`KEYS`] order.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "run_id" => self.run_id.clone(),
                "out_dir" => self.out_dir.display().to_string(),
                "data_dir" => self.data_dir.display().to_string(),
                "mode" => self.mode.name().to_string(),
                "fixed_length" => self.fixed_length.to_string(),
                "r_max" => t.max_length.to_string(),
                "d" => t.embedding_dim.to_string(),
                "lambda" => format!("{:e}", t.lambda),
                "p_e" => format!("{:e}", t.flip_probability),
                "batch_size" => t.batch_size.to_string(),
                "learning_rate" => format!("{:e}", t.learning_rate),
                "max_steps" => t.max_steps.to_string(),
                "seed" => t.seed.to_string(),
                "baseline_decay" => t
                    .baseline_decay
                    .map_or_else(|| "none".to_string(), |r| r.to_string()),
                "hidden" => join(&t.hidden),
                "sum_all_positions" => t.sum_all_positions.to_string(),
                "prefix_content_score" => t.prefix_content_score.to_string(),
                "grad_clip" => t.grad_clip.to_string(),
                "log_interval" => self.log_interval.to_string(),
                "eval_interval" => self.eval_interval.to_string(),
                "eval_subset" => self.eval_subset.to_string(),
                "eval_repetitions" => self.eval_repetitions.to_string(),
                "train_subset" => self.train_subset.to_string(),
                "ablation_blocks" => self.ablation_blocks.to_string(),
                "confidence" => self.confidence.to_string(),
                "sweep_lambda" => join(&self.sweep.lambdas),
                "sweep_pe" => join(&self.sweep.flip_probabilities),
                "sweep_rmax" => join(&self.sweep.max_lengths),
                "sweep_repetitions" => self.sweep.repetitions.to_string(),
                _ => unreachable!("every key is listed"),
            };
            writeln!(s, "{key} = {value}").expect("writing to a String");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, excluding output paths.
    pub fn hash(&self) -> String {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("out_dir") && !l.starts_with("data_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setting() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.train.max_length, 64);
        assert_eq!(cfg.train.embedding_dim, 64);
        assert_eq!(cfg.train.lambda, 1e-6);
        assert_eq!(cfg.train.flip_probability, 0.1);
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = RunConfig::parse(
            "# smoke\nr_max = 16\nlambda = 1e-4  # stronger\nhidden = 32, 16\nbaseline_decay = none\nmode = fixed-length-baseline\nfixed_length = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.train.max_length, 16);
        assert_eq!(cfg.train.lambda, 1e-4);
        assert_eq!(cfg.train.hidden, vec![32, 16]);
        assert_eq!(cfg.train.baseline_decay, None);
        assert_eq!(cfg.resolved_train().length_mode, LengthMode::Fixed(8));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("r_max = 8\nlamda = 1\nfoo = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda") && msg.contains("foo"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("lambda = -1").is_err());
        assert!(RunConfig::parse("mode = rdbo").is_err());
        assert!(RunConfig::parse("r_max = 8\nfixed_length = 9").is_err());
        assert!(RunConfig::parse("just a line").is_err());
    }

    #[test]
    fn noiseless_proxy_zeroes_the_channel() {
        let cfg = RunConfig::parse("mode = noiseless-proxy").unwrap();
        assert_eq!(cfg.resolved_train().flip_probability, 0.0);
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse("r_max = 12\nsweep_lambda = 1e-6,0.01\nhidden = 8\n").unwrap();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::parse("out_dir = /tmp/a").unwrap();
        let b = RunConfig::parse("out_dir = /tmp/b").unwrap();
        let c = RunConfig::parse("seed = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
