//! Likelihood-displacement analysis on single-token trap probes.
//!
//! For a probe with context-faithful ending `z_c` and memorized ending `z_p`,
//! the direction vector is `V = W[z_c] − W[z_p]`. Treating the probe's hidden
//! state `h` as the only trainable quantity ("theory mode"), one gradient step
//! of size `η` on the pair `((z_c), (z_p))` changes every logit by exactly
//!
//! ```text
//! Δlogit(z) = η c′₁ ⟨W[z], W[z_c] − λ W[z_p] + (λ − 1) Σ_v π(v) W[v]⟩
//! ```
//!
//! because logits are linear in `h`. At `λ = 1` and policy = reference this is
//! `η (β/2) ⟨W[z], V⟩`. Under training of the real parameters the chain rule
//! inserts a model-dependent positive-semidefinite map, so the ordering is only
//! checked statistically there.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_softmax};
use crate::metrics::{pearson, spearman, Correlation};
use crate::model::{Grads, ToyLM, Trainable};
use crate::objective::{coefficient, LossConfig, PairLogps};
use crate::selfsup::TrapProbe;
use crate::vocab::TokenId;

/// Stated in every ordering report.
pub const THEORY_MODE_NOTE: &str = "theory mode: the probe's hidden state is the only trainable parameter \
(embeddings, body and unembedding frozen); logits are linear in it, so the one-step logit change is exact. \
Full-model spearman values are reported for comparison and are not expected to be 1.";

/// Unembedding geometry of one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGeometry {
    /// `W[z_c] − W[z_p]`.
    pub direction: Vec<f64>,
    /// `⟨W[z], direction⟩` for every token.
    pub inner_products: Vec<f64>,
    /// The direction is the zero vector.
    pub degenerate: bool,
}

pub fn probe_direction(model: &ToyLM, probe: &TrapProbe) -> Result<ProbeGeometry> {
    probe.validate(&model.vocab)?;
    let w = &model.unembed;
    let direction: Vec<f64> = w.row(probe.z_c as usize).iter().zip(w.row(probe.z_p as usize)).map(|(a, b)| a - b).collect();
    let inner_products = (0..model.vocab_size()).map(|z| dot(w.row(z), &direction)).collect();
    let degenerate = direction.iter().all(|&v| v == 0.0);
    Ok(ProbeGeometry { direction, inner_products, degenerate })
}

/// Policy = reference scores of the single-token pair at the probe prompt.
fn init_logps(logp: &[f64], probe: &TrapProbe) -> Result<PairLogps> {
    let (c, p) = (logp[probe.z_c as usize], logp[probe.z_p as usize]);
    PairLogps::new(c, p, c, p)
}

/// Closed-form one-step logit change in theory mode (see the module docs).
pub fn hidden_flow_step(model: &ToyLM, probe: &TrapProbe, cfg: &LossConfig, eta: f64) -> Result<Vec<f64>> {
    probe.validate(&model.vocab)?;
    cfg.validate()?;
    let h = model.encode(&probe.prompt)?.h;
    let logp = log_softmax(&model.logits_from_hidden(&h));
    let c1 = coefficient(&init_logps(&logp, probe)?, cfg);
    let w = &model.unembed;
    let mut target = w.row(probe.z_c as usize).to_vec();
    axpy(&mut target, -cfg.lambda, w.row(probe.z_p as usize));
    if cfg.lambda != 1.0 {
        let expected_row = w.matvec_t(&logp.iter().map(|l| l.exp()).collect::<Vec<_>>());
        axpy(&mut target, cfg.lambda - 1.0, &expected_row);
    }
    Ok((0..model.vocab_size()).map(|z| eta * c1 * dot(w.row(z), &target)).collect())
}

/// Logits before and after one actual gradient step on the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStep {
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
}

impl HiddenStep {
    pub fn delta(&self) -> Vec<f64> {
        self.logits_after.iter().zip(&self.logits_before).map(|(a, b)| a - b).collect()
    }
}

/// Takes the step `h ← h − η ∇_h L` for the pair `((z_c), (z_p))`, with
/// `∇_h log π(z | h) = Wᵀ(onehot(z) − π)`, and re-evaluates the logits.
pub fn measured_hidden_step(model: &ToyLM, probe: &TrapProbe, cfg: &LossConfig, eta: f64) -> Result<HiddenStep> {
    probe.validate(&model.vocab)?;
    cfg.validate()?;
    let h = model.encode(&probe.prompt)?.h;
    let logits_before = model.logits_from_hidden(&h);
    let logp = log_softmax(&logits_before);
    let c1 = coefficient(&init_logps(&logp, probe)?, cfg);

    let grad_logp = |z: TokenId| {
        let mut g: Vec<f64> = logp.iter().map(|l| -l.exp()).collect();
        g[z as usize] += 1.0;
        model.unembed.matvec_t(&g)
    };
    let mut grad_loss = grad_logp(probe.z_c);
    grad_loss.iter_mut().for_each(|g| *g *= -c1);
    axpy(&mut grad_loss, c1 * cfg.lambda, &grad_logp(probe.z_p));

    let mut stepped = h.clone();
    axpy(&mut stepped, -eta, &grad_loss);
    Ok(HiddenStep { logits_before, logits_after: model.logits_from_hidden(&stepped) })
}

/// One gradient step of the real parameters selected by `mask`; returns the
/// change in next-token log-probabilities at the probe prompt.
pub fn full_model_step(model: &ToyLM, probe: &TrapProbe, cfg: &LossConfig, eta: f64, mask: Trainable) -> Result<Vec<f64>> {
    let before = model.next_token_logprobs(&probe.prompt)?;
    let c1 = coefficient(&init_logps(&before, probe)?, cfg);
    let mut grad = Grads::zeros_like(model);
    model.sequence_logprob_grad(&probe.prompt, &[probe.z_c], mask, -c1, &mut grad)?;
    model.sequence_logprob_grad(&probe.prompt, &[probe.z_p], mask, c1 * cfg.lambda, &mut grad)?;
    let mut stepped = model.clone();
    stepped.add_scaled(-eta, &grad);
    let after = stepped.next_token_logprobs(&probe.prompt)?;
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// Probability changes for one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDelta {
    pub z_c: TokenId,
    pub z_p: TokenId,
    pub dp_zc: f64,
    pub dp_zp: f64,
    /// Mean ΔP over non-special tokens other than `z_c`, `z_p`.
    pub dp_other_mean: f64,
    /// Mean |ΔP| over the same tokens.
    pub dp_other_abs_mean: f64,
    /// Σ_z ΔP(z); zero up to rounding.
    pub dp_sum: f64,
}

/// Class means across probes and the ΔP(z_c)/ΔP(z_p) correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub probes: Vec<ProbeDelta>,
    pub mean_dp_zc: f64,
    pub mean_dp_zp: f64,
    pub mean_dp_other: f64,
    pub mean_abs_dp_other: f64,
    /// Pearson r between ΔP(z_c) and ΔP(z_p) across probes.
    pub pearson_r: Correlation,
    /// Largest |Σ_z ΔP(z)| over probes.
    pub max_conservation_error: f64,
}

impl DisplacementReport {
    /// `probe,z_c,z_p,dp_zc,dp_zp` rows for scatter plots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe,z_c,z_p,dp_zc,dp_zp\n");
        for (i, p) in self.probes.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{}", p.z_c, p.z_p, p.dp_zc, p.dp_zp);
        }
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `ΔP(z) = π_after(z | prompt) − π_before(z | prompt)` for every probe.
pub fn measure_displacement(before: &ToyLM, after: &ToyLM, probes: &[TrapProbe]) -> Result<DisplacementReport> {
    before.check_compatible(after)?;
    let vocab = &before.vocab;
    let deltas: Vec<ProbeDelta> = probes
        .par_iter()
        .map(|probe| {
            probe.validate(vocab)?;
            let p0 = before.next_token_probs(&probe.prompt)?;
            let p1 = after.next_token_probs(&probe.prompt)?;
            let dp: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
            let others = || {
                (0..dp.len() as TokenId)
                    .filter(|&z| !vocab.is_special(z) && z != probe.z_c && z != probe.z_p)
                    .map(|z| dp[z as usize])
            };
            Ok(ProbeDelta {
                z_c: probe.z_c,
                z_p: probe.z_p,
                dp_zc: dp[probe.z_c as usize],
                dp_zp: dp[probe.z_p as usize],
                dp_other_mean: mean(others()),
                dp_other_abs_mean: mean(others().map(f64::abs)),
                dp_sum: dp.iter().sum(),
            })
        })
        .collect::<Result<_>>()?;
    let zc: Vec<f64> = deltas.iter().map(|d| d.dp_zc).collect();
    let zp: Vec<f64> = deltas.iter().map(|d| d.dp_zp).collect();
    let pearson_r = if deltas.len() < 2 { Correlation::Degenerate } else { pearson(&zc, &zp)? };
    Ok(DisplacementReport {
        mean_dp_zc: mean(zc.iter().copied()),
        mean_dp_zp: mean(zp.iter().copied()),
        mean_dp_other: mean(deltas.iter().map(|d| d.dp_other_mean)),
        mean_abs_dp_other: mean(deltas.iter().map(|d| d.dp_other_abs_mean)),
        max_conservation_error: deltas.iter().map(|d| d.dp_sum.abs()).fold(0.0, f64::max),
        pearson_r,
        probes: deltas,
    })
}

/// Ordering check for one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOrdering {
    /// Rank agreement of inner products with the theory-mode logit change.
    pub spearman: Correlation,
    /// Δlogit(z_c) exceeds the mean over other non-special tokens.
    pub zc_above_others: bool,
    /// Δlogit(z_p) is below that mean.
    pub zp_below_others: bool,
    pub degenerate_geometry: bool,
    /// Same rank check under one step of the unembedding only.
    pub unembedding_spearman: Correlation,
    /// Same rank check under one step of the body only.
    pub body_spearman: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub note: String,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub probes: Vec<ProbeOrdering>,
    /// Fraction of non-degenerate probes with both class inequalities.
    pub fraction_both: f64,
    pub degenerate_probes: usize,
}

/// Per-probe Spearman between `⟨W[z], V⟩` and the measured one-step logit
/// change in theory mode, plus the class inequalities.
pub fn verify_eq3_ordering(model: &ToyLM, probes: &[TrapProbe], cfg: &LossConfig, eta: f64) -> Result<OrderingReport> {
    let vocab = &model.vocab;
    let rows: Vec<ProbeOrdering> = probes
        .par_iter()
        .map(|probe| {
            let geometry = probe_direction(model, probe)?;
            let delta = measured_hidden_step(model, probe, cfg, eta)?.delta();
            let others: Vec<f64> = (0..delta.len() as TokenId)
                .filter(|&z| !vocab.is_special(z) && z != probe.z_c && z != probe.z_p)
                .map(|z| delta[z as usize])
                .collect();
            let other_mean = mean(others.iter().copied());
            let degenerate = geometry.degenerate;
            let ranks = |changes: &[f64]| -> Result<Correlation> {
                if degenerate {
                    Ok(Correlation::Degenerate)
                } else {
                    spearman(&geometry.inner_products, changes)
                }
            };
            Ok(ProbeOrdering {
                spearman: ranks(&delta)?,
                zc_above_others: !degenerate && delta[probe.z_c as usize] > other_mean,
                zp_below_others: !degenerate && delta[probe.z_p as usize] < other_mean,
                degenerate_geometry: degenerate,
                unembedding_spearman: ranks(&full_model_step(model, probe, cfg, eta, Trainable::UnembeddingOnly)?)?,
                body_spearman: ranks(&full_model_step(model, probe, cfg, eta, Trainable::BodyOnly)?)?,
            })
        })
        .collect::<Result<_>>()?;
    let live: Vec<&ProbeOrdering> = rows.iter().filter(|r| !r.degenerate_geometry).collect();
    let fraction_both = if live.is_empty() {
        0.0
    } else {
        live.iter().filter(|r| r.zc_above_others && r.zp_below_others).count() as f64 / live.len() as f64
    };
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Error::Domain(format!("step size must be positive, got {eta}")));
    }
    Ok(OrderingReport {
        note: THEORY_MODE_NOTE.to_string(),
        beta: cfg.beta,
        lambda: cfg.lambda,
        eta,
        degenerate_probes: rows.len() - live.len(),
        fraction_both,
        probes: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::vocab::Vocabulary;

    fn orthonormal_model() -> ToyLM {
        // 4 specials + 3 words, d = 7: W rows are the standard basis.
        let v = Vocabulary::with_specials(["a", "b", "c"]).unwrap();
        let mut m = ToyLM::zeros(v, 7).unwrap();
        m.unembed = Matrix::from_fn(7, 7, |r, c| if r == c { 1.0 } else { 0.0 });
        m
    }

    #[test]
    fn orthonormal_geometry() {
        let m = orthonormal_model();
        let probe = TrapProbe::new(&m.vocab, vec![0, 4], 4, 5).unwrap();
        let g = probe_direction(&m, &probe).unwrap();
        assert_eq!(g.inner_products[4], 1.0);
        assert_eq!(g.inner_products[5], -1.0);
        for z in [0, 1, 2, 3, 6] {
            assert_eq!(g.inner_products[z], 0.0);
        }
        assert!(!g.degenerate);
    }

    #[test]
    fn equal_rows_are_degenerate() {
        let mut m = orthonormal_model();
        m.unembed = Matrix::from_fn(7, 7, |_, c| c as f64);
        let probe = TrapProbe::new(&m.vocab, vec![0, 4], 4, 5).unwrap();
        assert!(probe_direction(&m, &probe).unwrap().degenerate);
        let report = verify_eq3_ordering(&m, &[probe], &LossConfig::default(), 1e-3).unwrap();
        assert!(report.probes[0].degenerate_geometry);
        assert_eq!(report.degenerate_probes, 1);
        assert!(report.probes[0].spearman.is_degenerate());
    }

    #[test]
    fn identical_models_have_no_displacement() {
        let m = orthonormal_model();
        let probes = vec![
            TrapProbe::new(&m.vocab, vec![0, 4], 4, 5).unwrap(),
            TrapProbe::new(&m.vocab, vec![0, 5, 6], 6, 4).unwrap(),
        ];
        let r = measure_displacement(&m, &m, &probes).unwrap();
        assert!(r.probes.iter().all(|p| p.dp_zc == 0.0 && p.dp_zp == 0.0));
        assert_eq!(r.pearson_r, Correlation::Degenerate);
        assert!(r.to_csv().starts_with("probe,z_c,z_p,dp_zc,dp_zp\n0,4,5,0,0\n"));
    }

    #[test]
    fn mismatched_vocabularies_rejected() {
        let m = orthonormal_model();
        let other = ToyLM::zeros(Vocabulary::with_specials(["x", "y", "z"]).unwrap(), 7).unwrap();
        assert!(matches!(measure_displacement(&m, &other, &[]), Err(Error::Config(_))));
    }
}
