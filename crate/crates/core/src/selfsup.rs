//! Self-supervised preference data and the synthetic memorization-trap suite.
//!
//! Prompt layouts:
//!
//! ```text
//! with context:  BOS ⊕ context ⊕ SEP ⊕ query ⊕ SEP
//! query only:    BOS ⊕ query ⊕ SEP
//! ```
//!
//! A preferred response is sampled from the with-context prompt and a rejected
//! one from the query-only prompt. Both are later scored on the with-context
//! prompt by the objective.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ToyLM;
use crate::rng::{self, stream_seed};
use crate::vocab::{TokenId, Vocabulary};

/// The instruction token opening every trap context ("end the quote with ...").
pub const INSTR: &str = "<instr-endword>";

/// Default decoding temperature for pair generation.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
/// Default response length cap.
pub const DEFAULT_MAX_LEN: usize = 8;

/// A query with its context and (evaluation-only) gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub query: Vec<TokenId>,
    pub context: Vec<TokenId>,
    /// Used for evaluation only; never part of a [`PreferencePair`].
    pub gold_context_answer: Vec<TokenId>,
}

impl Task {
    pub fn new(
        vocab: &Vocabulary,
        query: Vec<TokenId>,
        context: Vec<TokenId>,
        gold_context_answer: Vec<TokenId>,
    ) -> Result<Self> {
        let task = Self { query, context, gold_context_answer };
        task.validate(vocab)?;
        Ok(task)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.query.is_empty() || self.context.is_empty() {
            return Err(Error::Precondition("task query and context must be non-empty".into()));
        }
        for part in [&self.query, &self.context, &self.gold_context_answer] {
            vocab.check(part)?;
        }
        if let Some(t) = self.query.iter().chain(&self.context).find(|&&t| vocab.is_special(t)) {
            return Err(Error::Precondition(format!("special token {t} inside task payload")));
        }
        Ok(())
    }
}

/// One self-supervised training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query: Vec<TokenId>,
    pub context: Vec<TokenId>,
    /// `y_c′`, sampled with the context.
    pub chosen: Vec<TokenId>,
    /// `y_p`, sampled from the query alone.
    pub rejected: Vec<TokenId>,
    pub chosen_seed: u64,
    pub rejected_seed: u64,
}

impl PreferencePair {
    /// The with-context prompt both responses are scored on.
    pub fn prompt(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        layout_with_context(vocab, &self.context, &self.query)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.query.is_empty() || self.context.is_empty() {
            return Err(Error::Precondition("pair query and context must be non-empty".into()));
        }
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Precondition("pair responses must be non-empty".into()));
        }
        for part in [&self.query, &self.context, &self.chosen, &self.rejected] {
            vocab.check(part)?;
        }
        Ok(())
    }
}

/// A single-token conflict between an instructed ending and a memorized one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapProbe {
    pub prompt: Vec<TokenId>,
    /// The ending the context asks for.
    pub z_c: TokenId,
    /// The memorized ending.
    pub z_p: TokenId,
}

impl TrapProbe {
    pub fn new(vocab: &Vocabulary, prompt: Vec<TokenId>, z_c: TokenId, z_p: TokenId) -> Result<Self> {
        let probe = Self { prompt, z_c, z_p };
        probe.validate(vocab)?;
        Ok(probe)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Precondition("probe prompt must be non-empty".into()));
        }
        vocab.check(&self.prompt)?;
        vocab.check(&[self.z_c, self.z_p])?;
        if self.z_c == self.z_p {
            return Err(Error::Precondition(format!("probe endings coincide (token {})", self.z_c)));
        }
        if vocab.is_special(self.z_c) || vocab.is_special(self.z_p) {
            return Err(Error::Precondition("probe endings must not be special tokens".into()));
        }
        Ok(())
    }
}

/// Pretraining documents. Each is scored after a leading BOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(Error::Precondition(format!("corpus sequence {i} has length {} < 3", s.len())));
            }
            self.vocab.check(s)?;
        }
        Ok(())
    }
}

fn layout_with_context(vocab: &Vocabulary, context: &[TokenId], query: &[TokenId]) -> Vec<TokenId> {
    let s = vocab.specials();
    let mut p = Vec::with_capacity(context.len() + query.len() + 3);
    p.push(s.bos);
    p.extend_from_slice(context);
    p.push(s.sep);
    p.extend_from_slice(query);
    p.push(s.sep);
    p
}

fn layout_query_only(vocab: &Vocabulary, query: &[TokenId]) -> Vec<TokenId> {
    let s = vocab.specials();
    let mut p = Vec::with_capacity(query.len() + 2);
    p.push(s.bos);
    p.extend_from_slice(query);
    p.push(s.sep);
    p
}

/// `BOS ⊕ context ⊕ SEP ⊕ query ⊕ SEP`.
pub fn build_prompt_with_context(vocab: &Vocabulary, task: &Task) -> Vec<TokenId> {
    layout_with_context(vocab, &task.context, &task.query)
}

/// `BOS ⊕ query ⊕ SEP`.
pub fn build_prompt_query_only(vocab: &Vocabulary, task: &Task) -> Vec<TokenId> {
    layout_query_only(vocab, &task.query)
}

/// Inverse of [`build_prompt_with_context`]: returns `(context, query)`.
pub fn parse_prompt_with_context(vocab: &Vocabulary, prompt: &[TokenId]) -> Option<(Vec<TokenId>, Vec<TokenId>)> {
    let s = vocab.specials();
    let body = prompt.strip_prefix(&[s.bos])?.strip_suffix(&[s.sep])?;
    let mut parts = body.split(|&t| t == s.sep);
    let context = parts.next()?.to_vec();
    let query = parts.next()?.to_vec();
    if parts.next().is_some() || context.is_empty() || query.is_empty() {
        return None;
    }
    Some((context, query))
}

/// Inverse of [`build_prompt_query_only`].
pub fn parse_prompt_query_only(vocab: &Vocabulary, prompt: &[TokenId]) -> Option<Vec<TokenId>> {
    let s = vocab.specials();
    let query = prompt.strip_prefix(&[s.bos])?.strip_suffix(&[s.sep])?;
    (!query.is_empty() && !query.contains(&s.sep)).then(|| query.to_vec())
}

/// Decoding settings for pair generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, max_len: DEFAULT_MAX_LEN, seed: 17 }
    }
}

/// Retained pairs plus filter bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeneration {
    pub pairs: Vec<PreferencePair>,
    pub retained: usize,
    pub dropped: usize,
}

impl PairGeneration {
    pub fn retained_fraction(&self) -> f64 {
        self.retained as f64 / (self.retained + self.dropped) as f64
    }
}

/// True when a rejected response carries no parametric answer: empty, or
/// exactly the refusal token.
pub fn is_refusal(vocab: &Vocabulary, response: &[TokenId]) -> bool {
    response.is_empty() || response == [vocab.specials().idk]
}

/// Samples a chosen response with context and a rejected one without, per task,
/// and drops pairs whose rejected response is a refusal.
///
/// Each response is drawn from its own generator seeded by
/// `hash(seed, "pairs/<task index>/<role>")`, so the output does not depend on
/// scheduling.
pub fn generate_pairs(model: &ToyLM, tasks: &[Task], cfg: &SamplingConfig) -> Result<PairGeneration> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let vocab = &model.vocab;
    for t in tasks {
        t.validate(vocab)?;
    }
    let sampled: Vec<Option<PreferencePair>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<Option<PreferencePair>> {
            let chosen_seed = stream_seed(cfg.seed, &format!("pairs/{i}/chosen"));
            let rejected_seed = stream_seed(cfg.seed, &format!("pairs/{i}/rejected"));
            let chosen = model.sample(
                &build_prompt_with_context(vocab, task),
                cfg.temperature,
                cfg.max_len,
                &mut rng::seeded(chosen_seed),
            )?;
            let rejected = model.sample(
                &build_prompt_query_only(vocab, task),
                cfg.temperature,
                cfg.max_len,
                &mut rng::seeded(rejected_seed),
            )?;
            // An empty chosen response cannot be scored; it is kept out as well.
            if is_refusal(vocab, &rejected) || chosen.is_empty() {
                return Ok(None);
            }
            Ok(Some(PreferencePair {
                query: task.query.clone(),
                context: task.context.clone(),
                chosen,
                rejected,
                chosen_seed,
                rejected_seed,
            }))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<PreferencePair> = sampled.into_iter().flatten().collect();
    let retained = pairs.len();
    let dropped = tasks.len() - retained;
    if retained == 0 {
        return Err(Error::DataGeneration(format!(
            "no pairs retained: all {} tasks produced an empty or refusal response",
            tasks.len()
        )));
    }
    Ok(PairGeneration { pairs, retained, dropped })
}

/// Cycles `tasks` until `n` tasks are listed.
pub fn repeat_tasks(tasks: &[Task], n: usize) -> Vec<Task> {
    tasks.iter().cycle().take(if tasks.is_empty() { 0 } else { n }).cloned().collect()
}

/// Shape of the synthetic memorization-trap suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_proverbs: usize,
    pub vocab_size: usize,
    /// Hidden width of the model that will be trained on the suite.
    pub hidden_dim: usize,
    /// Words per proverb before its ending.
    pub prefix_len: usize,
    /// Context-following demonstrations per proverb.
    pub instruction_demos: f64,
    /// Copies of each proverb inside an instruction context that names its
    /// own memorized ending.
    pub agreement_demos: usize,
    /// Refusal demonstrations per proverb.
    pub refusal_demos: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_proverbs: 40,
            vocab_size: 48,
            hidden_dim: 16,
            prefix_len: 2,
            instruction_demos: 2.0,
            agreement_demos: 2,
            refusal_demos: 0.25,
        }
    }
}

/// Everything built by [`build_trap_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrapSuite {
    pub corpus: Corpus,
    pub probes: Vec<TrapProbe>,
    pub tasks: Vec<Task>,
    /// The memorized `(prefix, ending)` of each proverb.
    pub proverbs: Vec<(Vec<TokenId>, TokenId)>,
}

impl TrapSuite {
    pub fn vocab(&self) -> &Vocabulary {
        &self.corpus.vocab
    }
}

/// Token-id ranges of the suite vocabulary.
#[derive(Debug, Clone)]
struct SuiteLayout {
    instr: TokenId,
    endings: Vec<TokenId>,
    alternatives: Vec<TokenId>,
    words: Vec<TokenId>,
}

fn suite_vocabulary(cfg: &SuiteConfig) -> Result<(Vocabulary, SuiteLayout)> {
    let reserved = 5;
    let available = cfg.vocab_size.saturating_sub(reserved);
    let n_endings = (available / 4).max(4);
    let n_words = available.saturating_sub(2 * n_endings);
    if n_words < cfg.prefix_len.max(8) || available < 16 {
        return Err(Error::Config(format!(
            "vocabulary size {} too small: need at least {} tokens for distinct endings and proverb words",
            cfg.vocab_size,
            reserved + 16.max(cfg.prefix_len + 8)
        )));
    }
    let mut names = vec![INSTR.to_string()];
    names.extend((0..n_endings).map(|i| format!("end{i:02}")));
    names.extend((0..n_endings).map(|i| format!("alt{i:02}")));
    names.extend((0..n_words).map(|i| format!("w{i:02}")));
    let vocab = Vocabulary::with_specials(names)?;
    let instr = vocab.id(INSTR).expect("instruction token present");
    let first_alt = instr + 1 + n_endings as TokenId;
    let first_word = first_alt + n_endings as TokenId;
    Ok((
        vocab.clone(),
        SuiteLayout {
            instr,
            endings: (instr + 1..first_alt).collect(),
            alternatives: (first_alt..first_word).collect(),
            words: (first_word..vocab.len() as TokenId).collect(),
        },
    ))
}

/// Builds the proverb corpus, one trap probe and one task per proverb.
///
/// Proverbs are random bags of `prefix_len` distinct words with a memorized
/// ending `z_p`; each probe asks (through its context) for an alternative
/// ending `z_c`. Memorized and alternative endings come from disjoint token
/// pools, so no token is the parametric answer of one probe and the
/// contextual answer of another. The corpus also carries context-following
/// demonstrations on fresh word bags with alternative endings, so the trained
/// model has a genuine conflict between copying the instructed ending and
/// recalling the memorized one, plus a few refusal demonstrations for
/// unfamiliar queries.
pub fn build_trap_suite(cfg: &SuiteConfig) -> Result<TrapSuite> {
    if cfg.n_proverbs < 10 {
        return Err(Error::Config(format!("need at least 10 proverbs, got {}", cfg.n_proverbs)));
    }
    if cfg.prefix_len < 2 {
        return Err(Error::Config("proverb prefixes need at least 2 words".into()));
    }
    if cfg.hidden_dim < 2 {
        return Err(Error::Config(format!("hidden dimension {} < 2", cfg.hidden_dim)));
    }
    let (vocab, layout) = suite_vocabulary(cfg)?;
    let specials = vocab.specials();
    let mut rng = rng::stream(cfg.seed, "suite");

    let n_instruction = (cfg.instruction_demos * cfg.n_proverbs as f64).round() as usize;
    let n_refusal = (cfg.refusal_demos * cfg.n_proverbs as f64).round() as usize;
    let mut seen: BTreeSet<Vec<TokenId>> = BTreeSet::new();
    let mut fresh_bag = |rng: &mut rng::StreamRng| -> Result<Vec<TokenId>> {
        for _ in 0..10_000 {
            let mut bag: Vec<TokenId> = layout.words.choose_multiple(rng, cfg.prefix_len).copied().collect();
            bag.shuffle(rng);
            let mut key = bag.clone();
            key.sort_unstable();
            if seen.insert(key) {
                return Ok(bag);
            }
        }
        Err(Error::Config("cannot draw enough distinct proverb prefixes; enlarge the vocabulary".into()))
    };

    let mut proverbs = Vec::with_capacity(cfg.n_proverbs);
    for _ in 0..cfg.n_proverbs {
        let prefix = fresh_bag(&mut rng)?;
        let z_p = *layout.endings.choose(&mut rng).expect("non-empty endings");
        proverbs.push((prefix, z_p));
    }
    let mut tasks = Vec::with_capacity(cfg.n_proverbs);
    let mut probes = Vec::with_capacity(cfg.n_proverbs);
    for (prefix, z_p) in &proverbs {
        let z_c = *layout.alternatives.choose(&mut rng).expect("non-empty alternatives");
        let task = Task::new(&vocab, prefix.clone(), trap_context(layout.instr, z_c, prefix), vec![z_c])?;
        probes.push(TrapProbe::new(&vocab, build_prompt_with_context(&vocab, &task), z_c, *z_p)?);
        tasks.push(task);
    }

    let mut sequences = Vec::new();
    for (prefix, z_p) in &proverbs {
        sequences.push(document(&layout_query_only(&vocab, prefix)[1..], &[*z_p], specials.eos));
    }
    for (prefix, z_p) in &proverbs {
        for _ in 0..cfg.agreement_demos {
            let prompt = layout_with_context(&vocab, &trap_context(layout.instr, *z_p, prefix), prefix);
            sequences.push(document(&prompt[1..], &[*z_p], specials.eos));
        }
    }
    for _ in 0..n_instruction {
        let query = fresh_bag(&mut rng)?;
        let answer = *layout.alternatives.choose(&mut rng).expect("non-empty alternatives");
        let prompt = layout_with_context(&vocab, &trap_context(layout.instr, answer, &query), &query);
        sequences.push(document(&prompt[1..], &[answer], specials.eos));
    }
    for _ in 0..n_refusal {
        let query = fresh_bag(&mut rng)?;
        sequences.push(document(&layout_query_only(&vocab, &query)[1..], &[specials.idk], specials.eos));
    }
    // Interleave document kinds deterministically.
    sequences.shuffle(&mut rng);
    let corpus = Corpus { sequences, vocab };
    corpus.validate()?;
    Ok(TrapSuite { corpus, probes, tasks, proverbs })
}

/// `[INSTR, ending, prefix...]`.
fn trap_context(instr: TokenId, ending: TokenId, prefix: &[TokenId]) -> Vec<TokenId> {
    let mut c = vec![instr, ending];
    c.extend_from_slice(prefix);
    c
}

/// Prompt (without BOS) followed by the answer and EOS.
fn document(prompt_without_bos: &[TokenId], answer: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    let mut d = prompt_without_bos.to_vec();
    d.extend_from_slice(answer);
    d.push(eos);
    d
}

/// Uniformly random task over a vocabulary's non-special tokens; for property tests and examples.
pub fn random_task<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R, max_len: usize) -> Task {
    let payload: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect();
    let draw = |rng: &mut R| -> Vec<TokenId> {
        let n = rng.random_range(1..=max_len.max(1));
        (0..n).map(|_| *payload.choose(rng).expect("payload tokens")).collect()
    };
    let query = draw(rng);
    let context = draw(rng);
    let gold = draw(rng);
    Task { query, context, gold_context_answer: gold }
}
