//! The policy: a mean-pooled, single-layer softmax language model.
//!
//! ```text
//! h      = tanh(M · mean(E[t] for t in prefix) + b)
//! logits = W · h
//! ```
//!
//! `W` is the unembedding matrix; row `W[z]` is the output vector of token `z`.
//! Because pooling has no parameters of its own, `∂h/∂W = 0`, which keeps the
//! unembedding-trainable and body-trainable regimes cleanly separated.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_softmax, Matrix};
use crate::vocab::{TokenId, Vocabulary};

/// Below this temperature sampling degenerates to greedy argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    pub vocab: Vocabulary,
    /// Token embeddings, V×d.
    pub embed: Matrix,
    /// Body weight, d×d.
    pub body: Matrix,
    /// Body bias, d.
    pub bias: Vec<f64>,
    /// Unembedding, V×d.
    pub unembed: Matrix,
}

/// Pre-unembedding representation of a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub prefix_len: usize,
}

/// Which parameter blocks receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    All,
    /// Only `W`.
    UnembeddingOnly,
    /// `E`, `M` and `b`; `W` frozen.
    BodyOnly,
}

impl Trainable {
    pub const ALL: [Trainable; 3] = [Trainable::All, Trainable::UnembeddingOnly, Trainable::BodyOnly];

    pub fn unembedding(self) -> bool {
        matches!(self, Trainable::All | Trainable::UnembeddingOnly)
    }

    pub fn body(self) -> bool {
        matches!(self, Trainable::All | Trainable::BodyOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Trainable::All => "all",
            Trainable::UnembeddingOnly => "unembedding_only",
            Trainable::BodyOnly => "body_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A gradient (or any other tensor) with the parameter layout of a [`ToyLM`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub embed: Matrix,
    pub body: Matrix,
    pub bias: Vec<f64>,
    pub unembed: Matrix,
}

impl Grads {
    pub fn zeros_like(model: &ToyLM) -> Self {
        let (v, d) = (model.vocab_size(), model.hidden_dim());
        Self {
            embed: Matrix::zeros(v, d),
            body: Matrix::zeros(d, d),
            bias: vec![0.0; d],
            unembed: Matrix::zeros(v, d),
        }
    }

    /// Blocks in checkpoint order: E, M, b, W.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.embed.as_slice(), self.body.as_slice(), &self.bias, self.unembed.as_slice()]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.embed.as_mut_slice(),
            self.body.as_mut_slice(),
            &mut self.bias,
            self.unembed.as_mut_slice(),
        ]
    }

    /// All coordinates flattened in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Grads) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(dst, alpha, src);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| crate::linalg::dot(a, b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl ToyLM {
    pub fn new(vocab: Vocabulary, embed: Matrix, body: Matrix, bias: Vec<f64>, unembed: Matrix) -> Result<Self> {
        let model = Self { vocab, embed, body, bias, unembed };
        model.validate()?;
        Ok(model)
    }

    /// All parameters zero: uniform next-token distribution everywhere.
    pub fn zeros(vocab: Vocabulary, d: usize) -> Result<Self> {
        let v = vocab.len();
        Self::new(vocab, Matrix::zeros(v, d), Matrix::zeros(d, d), vec![0.0; d], Matrix::zeros(v, d))
    }

    /// Gaussian initialization: `E ~ N(0, 1)`, `M, W ~ N(0, 1/d)`, `b = 0`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocabulary, d: usize, rng: &mut R) -> Result<Self> {
        if d < 2 {
            return Err(Error::Config(format!("hidden dimension must be at least 2, got {d}")));
        }
        let v = vocab.len();
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let scaled = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let embed = Matrix::from_fn(v, d, |_, _| unit.sample(rng));
        let body = Matrix::from_fn(d, d, |_, _| scaled.sample(rng));
        let unembed = Matrix::from_fn(v, d, |_, _| scaled.sample(rng));
        Self::new(vocab, embed, body, vec![0.0; d], unembed)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, d) = (self.vocab.len(), self.bias.len());
        if v < 4 {
            return Err(Error::Config(format!("vocabulary size {v} < 4")));
        }
        if d < 2 {
            return Err(Error::Config(format!("hidden dimension {d} < 2")));
        }
        let shapes = [
            ("E", &self.embed, v, d),
            ("M", &self.body, d, d),
            ("W", &self.unembed, v, d),
        ];
        for (name, m, r, c) in shapes {
            if m.rows() != r || m.cols() != c {
                return Err(Error::Config(format!(
                    "{name} has shape {}x{}, expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        if !self.bias.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("b contains non-finite values".into()));
        }
        Ok(())
    }

    /// Same vocabulary and dimensions.
    pub fn check_compatible(&self, other: &ToyLM) -> Result<()> {
        if self.vocab != other.vocab {
            return Err(Error::Config("models have different vocabularies".into()));
        }
        if self.hidden_dim() != other.hidden_dim() {
            return Err(Error::Config(format!(
                "hidden dimensions differ: {} vs {}",
                self.hidden_dim(),
                other.hidden_dim()
            )));
        }
        Ok(())
    }

    /// Blocks in checkpoint order: E, M, b, W.
    pub fn param_blocks(&self) -> [&[f64]; 4] {
        [self.embed.as_slice(), self.body.as_slice(), &self.bias, self.unembed.as_slice()]
    }

    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.embed.as_mut_slice(),
            self.body.as_mut_slice(),
            &mut self.bias,
            self.unembed.as_mut_slice(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    /// `θ += alpha · g`.
    pub fn add_scaled(&mut self, alpha: f64, grads: &Grads) {
        for (dst, src) in self.param_blocks_mut().into_iter().zip(grads.blocks()) {
            axpy(dst, alpha, src);
        }
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for block in self.param_blocks() {
            for v in block {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Precondition("prefix must be non-empty".into()));
        }
        self.vocab.check(prefix)
    }

    /// Hidden state from a pre-activation mean embedding.
    fn hidden_from_mean(&self, mean: &[f64]) -> Vec<f64> {
        let mut pre = self.body.matvec(mean);
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p = (*p + b).tanh();
        }
        pre
    }

    pub fn encode(&self, prefix: &[TokenId]) -> Result<HiddenState> {
        self.check_prefix(prefix)?;
        let mut sum = vec![0.0; self.hidden_dim()];
        for &t in prefix {
            axpy(&mut sum, 1.0, self.embed.row(t as usize));
        }
        let n = prefix.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        Ok(HiddenState { h: self.hidden_from_mean(&mean), prefix_len: prefix.len() })
    }

    pub fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        self.unembed.matvec(h)
    }

    pub fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.logits_from_hidden(&self.encode(prefix)?.h))
    }

    pub fn next_token_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(prefix)?))
    }

    pub fn next_token_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_token_logprobs(prefix)?.into_iter().map(f64::exp).collect())
    }

    /// `Σᵢ log π(responseᵢ | prefix ⊕ response<ᵢ)`. No length normalization.
    pub fn sequence_logprob(&self, prefix: &[TokenId], response: &[TokenId]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::Precondition("response must be non-empty".into()));
        }
        self.check_prefix(prefix)?;
        self.vocab.check(response)?;
        self.teacher_forced(prefix, response, None)
    }

    /// Autoregressive sampling from `softmax(logits / temperature)`.
    ///
    /// Generation stops when EOS is drawn (EOS is not included in the output)
    /// or after `max_len` tokens. Temperatures below [`GREEDY_TEMPERATURE`]
    /// decode greedily, breaking ties toward the lowest token id.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prefix: &[TokenId],
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        if max_len == 0 {
            return Err(Error::Precondition("max_len must be at least 1".into()));
        }
        self.check_prefix(prefix)?;
        if temperature < GREEDY_TEMPERATURE {
            return self.decode(prefix, max_len, argmax);
        }
        self.decode(prefix, max_len, |logits| {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            categorical(&log_softmax(&scaled), rng.random::<f64>())
        })
    }

    /// Greedy decoding; the temperature → 0 limit of [`ToyLM::sample`].
    pub fn greedy(&self, prefix: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Precondition("max_len must be at least 1".into()));
        }
        self.check_prefix(prefix)?;
        self.decode(prefix, max_len, argmax)
    }

    fn decode(
        &self,
        prefix: &[TokenId],
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> TokenId,
    ) -> Result<Vec<TokenId>> {
        let eos = self.vocab.specials().eos;
        let mut context = prefix.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let next = pick(&self.logits(&context)?);
            if next == eos {
                break;
            }
            out.push(next);
            context.push(next);
        }
        Ok(out)
    }

    /// Accumulates `scale · ∇θ log π(response | prefix)` into `out` for the
    /// blocks selected by `mask`, and returns the log-probability.
    pub fn sequence_logprob_grad(
        &self,
        prefix: &[TokenId],
        response: &[TokenId],
        mask: Trainable,
        scale: f64,
        out: &mut Grads,
    ) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::Precondition("response must be non-empty".into()));
        }
        self.check_prefix(prefix)?;
        self.vocab.check(response)?;
        self.teacher_forced(prefix, response, Some((mask, scale, out)))
    }

    /// Scores every token of `targets`, each conditioned on `context ⊕ targets<ᵢ`,
    /// and optionally accumulates `scale ·` the gradient of the total into
    /// `grad`. Scoring and training share this path so their log-probabilities
    /// agree bit for bit.
    fn teacher_forced(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
        mut grad: Option<(Trainable, f64, &mut Grads)>,
    ) -> Result<f64> {
        let d = self.hidden_dim();
        let v = self.vocab_size();
        let body_grad = matches!(&grad, Some((mask, _, _)) if mask.body());
        let full: Vec<TokenId> = context.iter().chain(targets).copied().collect();
        let mut sum = vec![0.0; d];
        for &t in context {
            axpy(&mut sum, 1.0, self.embed.row(t as usize));
        }
        let mut mean = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut logits = vec![0.0; v];
        let mut g_h = vec![0.0; d];
        let mut g_pre = vec![0.0; d];
        // Per-position gradient w.r.t. the mean embedding, already divided by the
        // context length; spread over embedding rows afterwards via suffix sums.
        let mut mean_grads = vec![0.0; if body_grad { targets.len() * d } else { 0 }];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let n = context.len() + i;
            if i > 0 {
                axpy(&mut sum, 1.0, self.embed.row(full[n - 1] as usize));
            }
            for (m, s) in mean.iter_mut().zip(&sum) {
                *m = s / n as f64;
            }
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = (dot(self.body.row(k), &mean) + self.bias[k]).tanh();
            }
            for (r, l) in logits.iter_mut().enumerate() {
                *l = dot(self.unembed.row(r), &h);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            total += (logits[target as usize] / z).ln();

            let Some((mask, scale, out)) = grad.as_mut() else { continue };
            // ∂ log π(target) / ∂ logits = onehot(target) − π, reusing `logits`.
            for l in logits.iter_mut() {
                *l *= -*scale / z;
            }
            logits[target as usize] += *scale;
            let g_logits = &logits;

            if mask.unembedding() {
                out.unembed.add_outer(1.0, g_logits, &h);
            }
            if mask.body() {
                g_h.fill(0.0);
                for (r, &g) in g_logits.iter().enumerate() {
                    axpy(&mut g_h, g, self.unembed.row(r));
                }
                for ((gp, gh), hv) in g_pre.iter_mut().zip(&g_h).zip(&h) {
                    *gp = gh * (1.0 - hv * hv);
                }
                out.body.add_outer(1.0, &g_pre, &mean);
                axpy(&mut out.bias, 1.0, &g_pre);
                let g_mean = &mut mean_grads[i * d..(i + 1) * d];
                for (k, &gp) in g_pre.iter().enumerate() {
                    axpy(g_mean, gp / n as f64, self.body.row(k));
                }
            }
        }
        if let (true, Some((_, _, out))) = (body_grad, grad) {
            // Position j feeds every target whose context length exceeds j.
            let mut suffix = vec![0.0; d];
            for j in (0..full.len() - 1).rev() {
                if j + 1 >= context.len() {
                    let i = j + 1 - context.len();
                    axpy(&mut suffix, 1.0, &mean_grads[i * d..(i + 1) * d]);
                }
                axpy(out.embed.row_mut(full[j] as usize), 1.0, &suffix);
            }
        }
        Ok(total)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Inverse-CDF draw from a log-probability vector with `u ∈ [0, 1)`.
fn categorical(logprobs: &[f64], u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        cumulative += p;
        if u < cumulative {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}
