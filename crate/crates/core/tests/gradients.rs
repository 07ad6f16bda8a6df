mod common;

use common::*;
use ssfo_core::model::Trainable;
use ssfo_core::objective::{self, LossConfig};
use ssfo_core::rng;

const FD_STEP: f64 = 1e-6;

/// Central finite differences of the pair loss over every trainable coordinate.
fn finite_difference_check(seed: u64, lambda: f64, mask: Trainable) -> usize {
    let mut r = rng::seeded(seed);
    let model = random_model(&mut r);
    let reference = perturbed(&model, &mut r, 0.3);
    let pair = random_pair(&model.vocab, &mut r);
    let cfg = LossConfig::new(0.5, lambda).unwrap();

    let analytic = objective::pair_gradient(&model, &reference, &pair, &cfg, mask).unwrap().total();
    let mut checked = 0;
    for (b, grad_block) in analytic.blocks().iter().enumerate() {
        for (i, &a) in grad_block.iter().enumerate() {
            if !block_enabled(mask, b) {
                assert_eq!(a, 0.0, "frozen block {b} has a gradient");
                continue;
            }
            let mut plus = model.clone();
            plus.param_blocks_mut()[b][i] += FD_STEP;
            let mut minus = model.clone();
            minus.param_blocks_mut()[b][i] -= FD_STEP;
            let numeric =
                (pair_loss(&plus, &reference, &pair, &cfg) - pair_loss(&minus, &reference, &pair, &cfg)) / (2.0 * FD_STEP);
            assert!(
                close(a, numeric, 1e-5, 1e-9),
                "seed {seed} λ {lambda} mask {} block {b} index {i}: analytic {a} numeric {numeric}",
                mask.name()
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..8 {
        for lambda in [1.0, 1.3, 1.5] {
            for mask in Trainable::ALL {
                checked += finite_difference_check(seed, lambda, mask);
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn directional_derivative_matches() {
    for seed in 100..120 {
        let mut r = rng::seeded(seed);
        let model = random_model(&mut r);
        let reference = perturbed(&model, &mut r, 0.3);
        let pair = random_pair(&model.vocab, &mut r);
        let cfg = LossConfig::new(0.3, 1.4).unwrap();
        let g = objective::pair_gradient(&model, &reference, &pair, &cfg, Trainable::All).unwrap().total();
        let direction = {
            let mut d = g.clone();
            for block in d.blocks_mut() {
                for x in block.iter_mut() {
                    *x = rand::Rng::random_range(&mut r, -1.0..1.0);
                }
            }
            d
        };
        let eps = 1e-6;
        let mut plus = model.clone();
        plus.add_scaled(eps, &direction);
        let mut minus = model.clone();
        minus.add_scaled(-eps, &direction);
        let numeric = (pair_loss(&plus, &reference, &pair, &cfg) - pair_loss(&minus, &reference, &pair, &cfg)) / (2.0 * eps);
        let analytic = g.dot(&direction);
        assert!(close(analytic, numeric, 1e-6, 1e-9), "seed {seed}: {analytic} vs {numeric}");
    }
}

#[test]
fn lambda_one_gradient_equals_dpo_gradient() {
    for seed in 200..230 {
        let mut r = rng::seeded(seed);
        let model = random_model(&mut r);
        let reference = perturbed(&model, &mut r, 0.3);
        let pair = random_pair(&model.vocab, &mut r);
        let ssfo = objective::pair_gradient(&model, &reference, &pair, &LossConfig::new(0.1, 1.0).unwrap(), Trainable::All)
            .unwrap()
            .total();
        let dpo = objective::dpo_gradient(&model, &reference, &pair, 0.1, Trainable::All).unwrap();
        for (a, b) in ssfo.flatten().iter().zip(dpo.flatten()) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn rejected_component_scales_by_lambda() {
    // Policy = reference, so c′₁ = β/2 for every λ and only the explicit λ differs.
    for seed in 300..320 {
        let mut r = rng::seeded(seed);
        let model = random_model(&mut r);
        let pair = random_pair(&model.vocab, &mut r);
        let base = objective::pair_gradient(&model, &model, &pair, &LossConfig::new(0.1, 1.0).unwrap(), Trainable::All)
            .unwrap()
            .rejected_component();
        for lambda in [1.2, 1.5, 2.0] {
            let scaled =
                objective::pair_gradient(&model, &model, &pair, &LossConfig::new(0.1, lambda).unwrap(), Trainable::All)
                    .unwrap()
                    .rejected_component();
            for (x, y) in scaled.flatten().iter().zip(base.flatten()) {
                if y != 0.0 {
                    assert!((x / y - lambda).abs() <= 1e-12, "seed {seed}: ratio {}", x / y);
                } else {
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }
}

#[test]
fn descent_reduces_loss_for_small_steps() {
    for seed in 400..420 {
        let mut r = rng::seeded(seed);
        let model = random_model(&mut r);
        let reference = perturbed(&model, &mut r, 0.3);
        let pair = random_pair(&model.vocab, &mut r);
        let cfg = LossConfig::new(0.1, 1.5).unwrap();
        let g = objective::pair_gradient(&model, &reference, &pair, &cfg, Trainable::All).unwrap().total();
        let before = pair_loss(&model, &reference, &pair, &cfg);
        let mut stepped = model.clone();
        stepped.add_scaled(-1e-3, &g);
        assert!(pair_loss(&stepped, &reference, &pair, &cfg) < before, "seed {seed}");
    }
}

#[test]
fn sequence_gradient_is_zero_outside_mask() {
    let mut r = rng::seeded(9);
    let model = random_model(&mut r);
    let pair = random_pair(&model.vocab, &mut r);
    let prompt = pair.prompt(&model.vocab);
    let mut g = ssfo_core::Grads::zeros_like(&model);
    model.sequence_logprob_grad(&prompt, &pair.chosen, Trainable::UnembeddingOnly, 1.0, &mut g).unwrap();
    assert!(g.embed.as_slice().iter().all(|&x| x == 0.0));
    assert!(g.body.as_slice().iter().all(|&x| x == 0.0));
    assert!(g.bias.iter().all(|&x| x == 0.0));
    assert!(g.unembed.as_slice().iter().any(|&x| x != 0.0));
}
