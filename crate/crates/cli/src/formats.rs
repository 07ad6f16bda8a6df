//! JSONL line schemas and the suite directory layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssfo_core::selfsup::Task;
use ssfo_core::{Corpus, PreferencePair, TokenId, TrapProbe, Vocabulary};

use crate::error::{CliError, Result};
use crate::io;

pub const VOCAB_FILE: &str = "vocab.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PROBES_FILE: &str = "probes.jsonl";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusLine {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeLine {
    pub prompt: Vec<TokenId>,
    pub z_c: TokenId,
    pub z_p: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLine {
    pub query: Vec<TokenId>,
    pub context: Vec<TokenId>,
    pub gold_context_answer: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLine {
    pub query: Vec<TokenId>,
    pub context: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub chosen_seed: u64,
    pub rejected_seed: u64,
}

impl From<&PreferencePair> for PairLine {
    fn from(p: &PreferencePair) -> Self {
        Self {
            query: p.query.clone(),
            context: p.context.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            chosen_seed: p.chosen_seed,
            rejected_seed: p.rejected_seed,
        }
    }
}

impl From<PairLine> for PreferencePair {
    fn from(p: PairLine) -> Self {
        Self {
            query: p.query,
            context: p.context,
            chosen: p.chosen,
            rejected: p.rejected,
            chosen_seed: p.chosen_seed,
            rejected_seed: p.rejected_seed,
        }
    }
}

/// Parses a JSONL file and converts each line, reporting failures by line number.
fn read_checked<L, T>(path: &Path, convert: impl Fn(L) -> ssfo_core::Result<T>) -> Result<Vec<T>>
where
    L: serde::de::DeserializeOwned,
{
    let lines: Vec<L> = io::read_jsonl(path)?;
    let numbers = io::jsonl_line_numbers(path)?;
    lines
        .into_iter()
        .zip(numbers)
        .map(|(l, n)| convert(l).map_err(|e| CliError::Schema { path: path.into(), line: n, message: e.to_string() }))
        .collect()
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    io::read_json(path)
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let sequences = read_checked(path, |l: CorpusLine| {
        let c = Corpus { sequences: vec![l.tokens], vocab: vocab.clone() };
        c.validate()?;
        Ok(c.sequences.into_iter().next().expect("one sequence"))
    })?;
    Ok(Corpus { sequences, vocab: vocab.clone() })
}

pub fn read_probes(path: &Path, vocab: &Vocabulary) -> Result<Vec<TrapProbe>> {
    read_checked(path, |l: ProbeLine| TrapProbe::new(vocab, l.prompt, l.z_c, l.z_p))
}

pub fn read_tasks(path: &Path, vocab: &Vocabulary) -> Result<Vec<Task>> {
    read_checked(path, |l: TaskLine| Task::new(vocab, l.query, l.context, l.gold_context_answer))
}

pub fn read_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<PreferencePair>> {
    read_checked(path, |l: PairLine| {
        let p = PreferencePair::from(l);
        p.validate(vocab)?;
        Ok(p)
    })
}

pub fn corpus_lines(corpus: &Corpus) -> Vec<CorpusLine> {
    corpus.sequences.iter().map(|s| CorpusLine { tokens: s.clone() }).collect()
}

pub fn probe_lines(probes: &[TrapProbe]) -> Vec<ProbeLine> {
    probes.iter().map(|p| ProbeLine { prompt: p.prompt.clone(), z_c: p.z_c, z_p: p.z_p }).collect()
}

pub fn task_lines(tasks: &[Task]) -> Vec<TaskLine> {
    tasks
        .iter()
        .map(|t| TaskLine {
            query: t.query.clone(),
            context: t.context.clone(),
            gold_context_answer: t.gold_context_answer.clone(),
        })
        .collect()
}

/// A suite directory as written by `ssfo suite`.
#[derive(Debug, Clone)]
pub struct SuiteFiles {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub probes: Vec<TrapProbe>,
    pub tasks: Vec<Task>,
    pub paths: Vec<(&'static str, PathBuf)>,
}

pub fn load_suite(dir: &Path) -> Result<SuiteFiles> {
    let path = |name: &str| io::require(dir.join(name), "suite");
    let vocab_path = path(VOCAB_FILE)?;
    let corpus_path = path(CORPUS_FILE)?;
    let probes_path = path(PROBES_FILE)?;
    let tasks_path = path(TASKS_FILE)?;
    let vocab = read_vocab(&vocab_path)?;
    Ok(SuiteFiles {
        corpus: read_corpus(&corpus_path, &vocab)?,
        probes: read_probes(&probes_path, &vocab)?,
        tasks: read_tasks(&tasks_path, &vocab)?,
        vocab,
        paths: vec![
            ("suite/vocab.json", vocab_path),
            ("suite/corpus.jsonl", corpus_path),
            ("suite/probes.jsonl", probes_path),
            ("suite/tasks.jsonl", tasks_path),
        ],
    })
}
