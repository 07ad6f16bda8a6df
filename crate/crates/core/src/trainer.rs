//! Plain gradient descent for MLE pretraining and preference alignment.
//!
//! No momentum and no adaptive scaling: each update is `θ ← θ − η ∇L`, the
//! discrete counterpart of the gradient flow the displacement analysis assumes.
//! Per-item gradients may be computed in parallel but are always summed in
//! item order, so results do not depend on the thread count.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, ToyLM, Trainable};
use crate::objective::{self, LossConfig, PairLogps};
use crate::rng;
use crate::selfsup::{Corpus, PreferencePair};
use crate::vocab::TokenId;

/// Default alignment learning rate at toy scale.
pub const DEFAULT_ALIGN_LR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PretrainMle,
    Dpo,
    Ssfo,
    SsfoLambda,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::PretrainMle, Mode::Dpo, Mode::Ssfo, Mode::SsfoLambda];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PretrainMle => "pretrain_mle",
            Mode::Dpo => "dpo",
            Mode::Ssfo => "ssfo",
            Mode::SsfoLambda => "ssfo_lambda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_preference(self) -> bool {
        !matches!(self, Mode::PretrainMle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Pairs per step; 0 (or anything at least the dataset size) means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub loss: LossConfig,
    pub trainable: Trainable,
}

impl TrainConfig {
    pub fn pretrain(learning_rate: f64, steps: usize) -> Self {
        Self {
            learning_rate,
            steps,
            batch_size: 0,
            seed: 17,
            mode: Mode::PretrainMle,
            loss: LossConfig::default(),
            trainable: Trainable::All,
        }
    }

    pub fn align(mode: Mode, loss: LossConfig, learning_rate: f64, steps: usize) -> Self {
        Self { learning_rate, steps, batch_size: 0, seed: 17, mode, loss, trainable: Trainable::All }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.mode.is_preference() && self.steps == 0 {
            return Err(Error::Config("alignment needs at least one step".into()));
        }
        self.loss.validate()?;
        match self.mode {
            Mode::SsfoLambda if self.loss.lambda <= 1.0 => Err(Error::Config(format!(
                "mode ssfo_lambda requires lambda > 1, got {}",
                self.loss.lambda
            ))),
            Mode::Dpo | Mode::Ssfo if self.loss.lambda != 1.0 => Err(Error::Config(format!(
                "mode {} requires lambda = 1, got {}",
                self.mode.name(),
                self.loss.lambda
            ))),
            _ => Ok(()),
        }
    }
}

/// Batch means logged before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub logp_chosen: f64,
    pub logp_rejected: f64,
    /// Mean inner margin `β r_c − λ β r_p`.
    pub margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
}

pub const TRAJECTORY_HEADER: &str = "step,loss,logp_chosen,logp_rejected,margin";

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.logp_chosen, r.logp_rejected, r.margin);
        }
        out
    }

    pub fn margins(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.margin).collect()
    }
}

/// Per-step corpus negative log-likelihood (nats per token).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub nll: Vec<f64>,
}

impl PretrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,nll\n");
        for (i, v) in self.nll.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }
}

fn token_count(corpus: &Corpus) -> usize {
    corpus.sequences.iter().map(Vec::len).sum()
}

/// Mean NLL per token, every sequence scored after a leading BOS.
pub fn corpus_nll(model: &ToyLM, corpus: &Corpus) -> Result<f64> {
    let bos = [model.vocab.specials().bos];
    let total: f64 = corpus
        .sequences
        .iter()
        .map(|s| model.sequence_logprob(&bos, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(-total / token_count(corpus) as f64)
}

/// Mean log-likelihood per token and its gradient.
/// Sequences per parallel work item.
const GRAD_CHUNK: usize = 16;

fn corpus_loglik_grad(model: &ToyLM, corpus: &Corpus, mask: Trainable) -> Result<(f64, Grads)> {
    let bos = [model.vocab.specials().bos];
    let scale = 1.0 / token_count(corpus) as f64;
    // Fixed-size chunks keep the summation order independent of the thread count.
    let parts: Vec<(f64, Grads)> = corpus
        .sequences
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros_like(model);
            let mut lp = 0.0;
            for s in chunk {
                lp += model.sequence_logprob_grad(&bos, s, mask, scale, &mut g)?;
            }
            Ok((lp, g))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (mut loglik, mut total) = parts.next().unwrap_or_else(|| (0.0, Grads::zeros_like(model)));
    for (lp, g) in parts {
        loglik += lp;
        total.add_scaled(1.0, &g);
    }
    Ok((loglik * scale, total))
}

/// Full-batch gradient descent on the corpus NLL. The log holds the NLL
/// measured before each step.
pub fn pretrain_mle(model: &ToyLM, corpus: &Corpus, cfg: &TrainConfig) -> Result<(ToyLM, PretrainLog)> {
    if cfg.mode != Mode::PretrainMle {
        return Err(Error::Config(format!("pretrain_mle needs mode pretrain_mle, got {}", cfg.mode.name())));
    }
    cfg.validate()?;
    corpus.validate()?;
    if corpus.vocab != model.vocab {
        return Err(Error::Config("corpus and model vocabularies differ".into()));
    }
    if corpus.sequences.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let mut model = model.clone();
    let mut log = PretrainLog::default();
    for step in 0..cfg.steps {
        let (loglik, grad) = corpus_loglik_grad(&model, corpus, cfg.trainable)?;
        let nll = -loglik;
        if !nll.is_finite() || !grad.is_finite() {
            return Err(Error::Training { step, reason: format!("negative log-likelihood diverged ({nll})") });
        }
        log.nll.push(nll);
        model.add_scaled(cfg.learning_rate, &grad);
        if model.validate().is_err() {
            return Err(Error::Training { step, reason: "parameters became non-finite".into() });
        }
    }
    Ok((model, log))
}

/// Result of a preference-optimization run.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub policy: ToyLM,
    /// Frozen copy of the input model.
    pub reference: ToyLM,
    pub log: TrajectoryLog,
}

/// Pair indices used at each step.
fn batch_schedule(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    if cfg.batch_size == 0 || cfg.batch_size >= n {
        return vec![(0..n).collect(); cfg.steps];
    }
    let mut schedule = Vec::with_capacity(cfg.steps);
    let mut epoch = 0;
    while schedule.len() < cfg.steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("align/epoch/{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            if schedule.len() == cfg.steps {
                break;
            }
            schedule.push(chunk.to_vec());
        }
        epoch += 1;
    }
    schedule
}

/// Minimizes the λ-weighted preference loss by gradient descent.
///
/// The reference is a snapshot of `model` taken before the first update; its
/// scores are computed once. The log holds batch means measured before each update.
pub fn align(model: &ToyLM, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<Alignment> {
    if !cfg.mode.is_preference() {
        return Err(Error::Config("align needs a preference mode (dpo, ssfo, ssfo_lambda)".into()));
    }
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no preference pairs to train on".into()));
    }
    for p in pairs {
        p.validate(&model.vocab)?;
    }
    let reference = model.clone();
    let prompts: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.prompt(&model.vocab)).collect();
    let ref_scores: Vec<(f64, f64)> = pairs
        .par_iter()
        .zip(&prompts)
        .map(|(p, prompt)| objective::reference_logps(model, &reference, prompt, p))
        .collect::<Result<_>>()?;

    let mut policy = model.clone();
    let mut log = TrajectoryLog::default();
    for (step, batch) in batch_schedule(pairs.len(), cfg).into_iter().enumerate() {
        let grads: Vec<objective::PairGradient> = batch
            .par_iter()
            .map(|&i| {
                objective::pair_gradient_with_reference(
                    &policy,
                    &prompts[i],
                    &pairs[i],
                    ref_scores[i],
                    &cfg.loss,
                    cfg.trainable,
                )
            })
            .collect::<Result<_>>()?;
        let n = grads.len() as f64;
        let mut total = Grads::zeros_like(&policy);
        let mut record = StepRecord { step, loss: 0.0, logp_chosen: 0.0, logp_rejected: 0.0, margin: 0.0 };
        for g in &grads {
            let lp: &PairLogps = &g.logps;
            record.loss += objective::loss(lp, &cfg.loss);
            record.logp_chosen += lp.policy_chosen;
            record.logp_rejected += lp.policy_rejected;
            record.margin += objective::inner_margin(lp, &cfg.loss);
            total.add_scaled(-g.coefficient, &g.chosen);
            total.add_scaled(g.coefficient * g.lambda, &g.rejected);
        }
        record.loss /= n;
        record.logp_chosen /= n;
        record.logp_rejected /= n;
        record.margin /= n;
        if !record.loss.is_finite() || !total.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is not finite ({})", record.loss) });
        }
        log.records.push(record);
        policy.add_scaled(-cfg.learning_rate / n, &total);
        if policy.validate().is_err() {
            return Err(Error::Training { step, reason: "parameters became non-finite".into() });
        }
    }
    Ok(Alignment { policy, reference, log })
}
