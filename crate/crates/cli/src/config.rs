//! Run configuration: a `key = value` file plus `--set` overrides.
//!
//! Every key has a default, and the resolved map (all keys, canonical
//! formatting) is what goes into run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use ssfo_core::objective::DEFAULT_BETA;
use ssfo_core::selfsup::{SamplingConfig, SuiteConfig};
use ssfo_core::trainer::{Mode, TrainConfig, DEFAULT_ALIGN_LR};
use ssfo_core::{LossConfig, Trainable};

use crate::error::{CliError, Result};
use crate::io;

pub const DEFAULT_LAMBDAS: [f64; 6] = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub n_proverbs: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub prefix_len: usize,
    pub instruction_demos: f64,
    pub agreement_demos: usize,
    pub refusal_demos: f64,
    pub pretrain_lr: f64,
    pub pretrain_steps: usize,
    pub n_tasks: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub mode: Mode,
    pub beta: f64,
    pub lambda: f64,
    pub align_lr: f64,
    pub align_steps: usize,
    pub batch_size: usize,
    pub trainable: Trainable,
    /// Step size of the single theory-mode update used by `probe`.
    pub probe_eta: f64,
    pub lambdas: Vec<f64>,
}

pub const DEFAULT_PRETRAIN_LR: f64 = 2.0;
pub const DEFAULT_PRETRAIN_STEPS: usize = 2000;
pub const DEFAULT_ALIGN_STEPS: usize = 450;
pub const DEFAULT_N_TASKS: usize = 200;

impl Default for Config {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        let sampling = SamplingConfig::default();
        Self {
            seed: suite.seed,
            n_proverbs: suite.n_proverbs,
            vocab_size: suite.vocab_size,
            hidden_dim: suite.hidden_dim,
            prefix_len: suite.prefix_len,
            instruction_demos: suite.instruction_demos,
            agreement_demos: suite.agreement_demos,
            refusal_demos: suite.refusal_demos,
            pretrain_lr: DEFAULT_PRETRAIN_LR,
            pretrain_steps: DEFAULT_PRETRAIN_STEPS,
            n_tasks: DEFAULT_N_TASKS,
            temperature: sampling.temperature,
            max_len: sampling.max_len,
            mode: Mode::Ssfo,
            beta: DEFAULT_BETA,
            lambda: 1.0,
            align_lr: DEFAULT_ALIGN_LR,
            align_steps: DEFAULT_ALIGN_STEPS,
            batch_size: 0,
            trainable: Trainable::All,
            probe_eta: 1.0,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

pub fn parse_lambdas(value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse_num::<f64>("lambdas", s.trim())).collect()
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "n_proverbs" => self.n_proverbs = parse_num(key, v)?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "prefix_len" => self.prefix_len = parse_num(key, v)?,
            "instruction_demos" => self.instruction_demos = parse_num(key, v)?,
            "agreement_demos" => self.agreement_demos = parse_num(key, v)?,
            "refusal_demos" => self.refusal_demos = parse_num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(key, v)?,
            "n_tasks" => self.n_tasks = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "mode" => {
                self.mode = Mode::parse(v).ok_or_else(|| {
                    CliError::Config(format!("mode: unknown {v:?} (expected dpo, ssfo or ssfo_lambda)"))
                })?
            }
            "beta" => self.beta = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "align_lr" => self.align_lr = parse_num(key, v)?,
            "align_steps" => self.align_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "trainable" => {
                self.trainable = Trainable::parse(v).ok_or_else(|| {
                    CliError::Config(format!("trainable: unknown {v:?} (expected all, unembedding_only or body_only)"))
                })?
            }
            "probe_eta" => self.probe_eta = parse_num(key, v)?,
            "lambdas" => self.lambdas = parse_lambdas(v)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    /// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let schema = |message: String| CliError::Schema { path: path.into(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| schema("expected key = value".into()))?;
            cfg.set(k.trim(), v).map_err(|e| schema(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let pairs: [(&str, String); 22] = [
            ("seed", self.seed.to_string()),
            ("n_proverbs", self.n_proverbs.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("prefix_len", self.prefix_len.to_string()),
            ("instruction_demos", format!("{:?}", self.instruction_demos)),
            ("agreement_demos", self.agreement_demos.to_string()),
            ("refusal_demos", format!("{:?}", self.refusal_demos)),
            ("pretrain_lr", format!("{:?}", self.pretrain_lr)),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("n_tasks", self.n_tasks.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
            ("max_len", self.max_len.to_string()),
            ("mode", self.mode.name().to_string()),
            ("beta", format!("{:?}", self.beta)),
            ("lambda", format!("{:?}", self.lambda)),
            ("align_lr", format!("{:?}", self.align_lr)),
            ("align_steps", self.align_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("trainable", self.trainable.name().to_string()),
            ("probe_eta", format!("{:?}", self.probe_eta)),
            ("lambdas", fmt_list(&self.lambdas)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The file form of [`Config::entries`]; loading it gives back `self`.
    pub fn to_file_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            n_proverbs: self.n_proverbs,
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            prefix_len: self.prefix_len,
            instruction_demos: self.instruction_demos,
            agreement_demos: self.agreement_demos,
            refusal_demos: self.refusal_demos,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { temperature: self.temperature, max_len: self.max_len, seed: self.seed }
    }

    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..TrainConfig::pretrain(self.pretrain_lr, self.pretrain_steps) }
    }

    pub fn align(&self) -> Result<TrainConfig> {
        let loss = LossConfig::new(self.beta, self.lambda)?;
        let cfg = TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            trainable: self.trainable,
            ..TrainConfig::align(self.mode, loss, self.align_lr, self.align_steps)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Alignment settings for one point of a λ sweep: `ssfo` at λ = 1,
    /// `ssfo_lambda` above.
    pub fn align_at(&self, lambda: f64) -> Result<TrainConfig> {
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(CliError::Config(format!("sweep lambdas must be finite and >= 1, got {lambda}")));
        }
        let mode = if lambda == 1.0 { Mode::Ssfo } else { Mode::SsfoLambda };
        Config { mode, lambda, ..self.clone() }.align()
    }
}
