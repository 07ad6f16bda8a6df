#![allow(dead_code)]

use rand::Rng;
use ssfo_core::model::Trainable;
use ssfo_core::objective::{self, LossConfig};
use ssfo_core::{PreferencePair, ToyLM, TokenId, Vocabulary};

pub fn vocab_of_size(v: usize) -> Vocabulary {
    assert!(v >= 6);
    Vocabulary::with_specials((0..v - 4).map(|i| format!("t{i}"))).unwrap()
}

pub fn payload_tokens(vocab: &Vocabulary) -> Vec<TokenId> {
    (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect()
}

fn draw_tokens<R: Rng>(pool: &[TokenId], rng: &mut R, min: usize, max: usize) -> Vec<TokenId> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Random model with V in [6, 16] and d in [2, 8].
pub fn random_model<R: Rng>(rng: &mut R) -> ToyLM {
    let v = rng.random_range(6..=16);
    let d = rng.random_range(2..=8);
    let mut m = ToyLM::random(vocab_of_size(v), d, rng).unwrap();
    for b in m.bias.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    m
}

/// A copy of `model` with every parameter jittered, used as a reference.
pub fn perturbed<R: Rng>(model: &ToyLM, rng: &mut R, size: f64) -> ToyLM {
    let mut m = model.clone();
    for block in m.param_blocks_mut() {
        for x in block.iter_mut() {
            *x += rng.random_range(-size..size);
        }
    }
    m
}

/// Random pair whose responses may contain any token except BOS (EOS and
/// IDK included, so specials are exercised by the backward pass).
pub fn random_pair<R: Rng>(vocab: &Vocabulary, rng: &mut R) -> PreferencePair {
    let payload = payload_tokens(vocab);
    let s = vocab.specials();
    let mut response_pool = payload.clone();
    response_pool.extend([s.eos, s.idk, s.sep]);
    PreferencePair {
        query: draw_tokens(&payload, rng, 1, 4),
        context: draw_tokens(&payload, rng, 1, 4),
        chosen: draw_tokens(&response_pool, rng, 1, 3),
        rejected: draw_tokens(&response_pool, rng, 1, 3),
        chosen_seed: 0,
        rejected_seed: 0,
    }
}

pub fn pair_loss(model: &ToyLM, reference: &ToyLM, pair: &PreferencePair, cfg: &LossConfig) -> f64 {
    objective::loss(&objective::pair_logps(model, reference, pair).unwrap(), cfg)
}

pub fn block_enabled(mask: Trainable, block: usize) -> bool {
    // Block order: E, M, b, W.
    if block == 3 {
        mask.unembedding()
    } else {
        mask.body()
    }
}

/// `|a − n| ≤ max(rel·max(|a|, |n|), abs)`.
pub fn close(a: f64, n: f64, rel: f64, abs: f64) -> bool {
    (a - n).abs() <= (rel * a.abs().max(n.abs())).max(abs)
}
