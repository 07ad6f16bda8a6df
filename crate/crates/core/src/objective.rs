//! DPO-family preference losses and their analytic gradients.
//!
//! With log-ratios `r_c = log π_θ(y_c′|x,c) − log π_ref(y_c′|x,c)` and
//! `r_p = log π_θ(y_p|x,c) − log π_ref(y_p|x,c)`, the λ-weighted objective is
//!
//! ```text
//! u    = β r_c − λ β r_p
//! L    = −log σ(u) = softplus(−u)
//! ∇θ L = −c′₁ (∇θ log π_θ(y_c′|x,c) − λ ∇θ log π_θ(y_p|x,c)),   c′₁ = β σ(−u)
//! ```
//!
//! `λ = 1` is plain DPO on prompts that include the context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus};
use crate::model::{Grads, ToyLM, Trainable};
use crate::selfsup::PreferencePair;
use crate::vocab::TokenId;

/// Default β; the value is not pinned by any reported run, so it is swept in tests.
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn new(beta: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { beta, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Sequence log-probabilities of one pair under the policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogps {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PairLogps {
    pub fn new(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64) -> Result<Self> {
        let lp = Self { policy_chosen, policy_rejected, ref_chosen, ref_rejected };
        for v in [policy_chosen, policy_rejected, ref_chosen, ref_rejected] {
            if !v.is_finite() || v > 0.0 {
                return Err(Error::Domain(format!("log-probability {v} is not finite and <= 0")));
            }
        }
        Ok(lp)
    }

    pub fn chosen_log_ratio(&self) -> f64 {
        self.policy_chosen - self.ref_chosen
    }

    pub fn rejected_log_ratio(&self) -> f64 {
        self.policy_rejected - self.ref_rejected
    }
}

/// `u = β(policy_chosen − ref_chosen) − λβ(policy_rejected − ref_rejected)`.
pub fn inner_margin(lp: &PairLogps, cfg: &LossConfig) -> f64 {
    cfg.beta * lp.chosen_log_ratio() - cfg.lambda * cfg.beta * lp.rejected_log_ratio()
}

/// Partial derivatives of [`inner_margin`] w.r.t. `(policy_chosen, policy_rejected)`.
pub fn margin_partials(cfg: &LossConfig) -> (f64, f64) {
    (cfg.beta, -cfg.lambda * cfg.beta)
}

/// `−log σ(u)` in softplus form.
pub fn loss(lp: &PairLogps, cfg: &LossConfig) -> f64 {
    softplus(-inner_margin(lp, cfg))
}

/// The textbook DPO loss, written without λ.
pub fn dpo_loss(lp: &PairLogps, beta: f64) -> f64 {
    let logits = beta * (lp.policy_chosen - lp.ref_chosen) - beta * (lp.policy_rejected - lp.ref_rejected);
    softplus(-logits)
}

/// `c′₁ = β σ(λβ r_p − β r_c)`; lies in `(0, β)` for finite inputs.
pub fn coefficient(lp: &PairLogps, cfg: &LossConfig) -> f64 {
    let reversed = cfg.lambda * cfg.beta * lp.rejected_log_ratio() - cfg.beta * lp.chosen_log_ratio();
    cfg.beta * sigmoid(reversed)
}

/// Mean loss over a batch, summed in input order.
pub fn batch_loss(batch: &[PairLogps], cfg: &LossConfig) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|lp| loss(lp, cfg)).sum::<f64>() / batch.len() as f64
}

/// The two per-response gradients of a pair together with its weighting.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub logps: PairLogps,
    /// `c′₁`.
    pub coefficient: f64,
    pub lambda: f64,
    /// `∇θ log π_θ(y_c′ | x, c)`, restricted to the mask.
    pub chosen: Grads,
    /// `∇θ log π_θ(y_p | x, c)`, restricted to the mask.
    pub rejected: Grads,
}

impl PairGradient {
    /// `∇θ L = −c′₁ ∇ log π(y_c′) + c′₁ λ ∇ log π(y_p)`.
    pub fn total(&self) -> Grads {
        let mut g = self.chosen.clone();
        g.scale(-self.coefficient);
        g.add_scaled(self.coefficient * self.lambda, &self.rejected);
        g
    }

    /// The suppression term `c′₁ λ ∇ log π(y_p)`.
    pub fn rejected_component(&self) -> Grads {
        let mut g = self.rejected.clone();
        g.scale(self.coefficient * self.lambda);
        g
    }

    /// The term `−c′₁ ∇ log π(y_c′)`.
    pub fn chosen_component(&self) -> Grads {
        let mut g = self.chosen.clone();
        g.scale(-self.coefficient);
        g
    }
}

/// Policy and reference log-probabilities of both responses, scored on the
/// with-context prompt.
pub fn pair_logps(model: &ToyLM, reference: &ToyLM, pair: &PreferencePair) -> Result<PairLogps> {
    model.check_compatible(reference)?;
    let prompt = pair.prompt(&model.vocab);
    PairLogps::new(
        model.sequence_logprob(&prompt, &pair.chosen)?,
        model.sequence_logprob(&prompt, &pair.rejected)?,
        reference.sequence_logprob(&prompt, &pair.chosen)?,
        reference.sequence_logprob(&prompt, &pair.rejected)?,
    )
}

/// Analytic gradient of the λ-weighted loss for one pair.
pub fn pair_gradient(
    model: &ToyLM,
    reference: &ToyLM,
    pair: &PreferencePair,
    cfg: &LossConfig,
    trainable: Trainable,
) -> Result<PairGradient> {
    let prompt = pair.prompt(&model.vocab);
    let ref_logps = reference_logps(model, reference, &prompt, pair)?;
    pair_gradient_with_reference(model, &prompt, pair, ref_logps, cfg, trainable)
}

/// Reference log-probabilities `(chosen, rejected)` of a pair.
pub fn reference_logps(
    model: &ToyLM,
    reference: &ToyLM,
    prompt: &[TokenId],
    pair: &PreferencePair,
) -> Result<(f64, f64)> {
    model.check_compatible(reference)?;
    Ok((
        reference.sequence_logprob(prompt, &pair.chosen)?,
        reference.sequence_logprob(prompt, &pair.rejected)?,
    ))
}

/// As [`pair_gradient`] with the (frozen) reference scores supplied by the caller.
pub fn pair_gradient_with_reference(
    model: &ToyLM,
    prompt: &[TokenId],
    pair: &PreferencePair,
    (ref_chosen, ref_rejected): (f64, f64),
    cfg: &LossConfig,
    trainable: Trainable,
) -> Result<PairGradient> {
    cfg.validate()?;
    let mut chosen = Grads::zeros_like(model);
    let mut rejected = Grads::zeros_like(model);
    let policy_chosen = model.sequence_logprob_grad(prompt, &pair.chosen, trainable, 1.0, &mut chosen)?;
    let policy_rejected = model.sequence_logprob_grad(prompt, &pair.rejected, trainable, 1.0, &mut rejected)?;
    let logps = PairLogps::new(policy_chosen, policy_rejected, ref_chosen, ref_rejected)?;
    Ok(PairGradient { logps, coefficient: coefficient(&logps, cfg), lambda: cfg.lambda, chosen, rejected })
}

/// The standard DPO gradient `−β σ(−z)(∇ log π(y_w) − ∇ log π(y_l))` with
/// `z` the DPO logit, computed independently of the λ machinery.
pub fn dpo_gradient(
    model: &ToyLM,
    reference: &ToyLM,
    pair: &PreferencePair,
    beta: f64,
    trainable: Trainable,
) -> Result<Grads> {
    let prompt = pair.prompt(&model.vocab);
    let (ref_w, ref_l) = reference_logps(model, reference, &prompt, pair)?;
    let mut diff = Grads::zeros_like(model);
    let pw = model.sequence_logprob_grad(&prompt, &pair.chosen, trainable, 1.0, &mut diff)?;
    let pl = model.sequence_logprob_grad(&prompt, &pair.rejected, trainable, -1.0, &mut diff)?;
    let z = beta * (pw - ref_w) - beta * (pl - ref_l);
    diff.scale(-beta * sigmoid(-z));
    Ok(diff)
}
