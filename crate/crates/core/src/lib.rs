//! A desk-scale laboratory for self-supervised faithfulness optimization.
//!
//! The crate provides a small, fully transparent softmax language model,
//! DPO-family preference objectives with analytic gradients, self-supervised
//! preference-pair construction, a gradient-descent trainer, a
//! likelihood-displacement probe suite, and text-overlap metrics.

pub mod displacement;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod selfsup;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{Grads, HiddenState, ToyLM, Trainable};
pub use objective::{LossConfig, PairLogps};
pub use selfsup::{Corpus, PreferencePair, Task, TrapProbe, TrapSuite};
pub use vocab::{TokenId, Vocabulary};
