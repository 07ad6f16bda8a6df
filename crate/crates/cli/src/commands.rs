//! The pipeline stages. Each reads prior-stage files, writes its own outputs
//! and finishes with a run manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssfo_core::displacement::{measure_displacement, verify_eq3_ordering, DisplacementReport};
use ssfo_core::metrics::{pearson, summarize, Correlation, EvalRecord, EvalSummary};
use ssfo_core::selfsup::{build_prompt_with_context, build_trap_suite, generate_pairs, repeat_tasks, Task};
use ssfo_core::trainer::{align, pretrain_mle, Alignment, TrainConfig};
use ssfo_core::{rng, LossConfig, PreferencePair, ToyLM, TrapProbe};

use crate::checkpoint;
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::formats::{self, load_suite, PairLine};
use crate::io;
use crate::manifest::{Run, RunManifest};

pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const GENERATION_FILE: &str = "generation.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DISPLACEMENT_FILE: &str = "displacement.json";
pub const DISPLACEMENT_CSV_FILE: &str = "displacement.csv";
pub const ORDERING_FILE: &str = "ordering.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const SWEEP_JSON_FILE: &str = "sweep.json";
pub const SWEEP_HEADER: &str = "lambda,span_em,mean_dp_zc,mean_dp_zp,pearson_r";

fn record_checkpoint(run: &mut Run, model: &ToyLM) -> Result<()> {
    checkpoint::save(model, run.dir())?;
    run.record(checkpoint::PAYLOAD_FILE)?;
    run.record(checkpoint::MANIFEST_FILE)
}

fn record_checkpoint_inputs(run: &mut Run, role: &str, dir: &Path) -> Result<()> {
    run.input(&format!("{role}/{}", checkpoint::MANIFEST_FILE), &dir.join(checkpoint::MANIFEST_FILE))?;
    run.input(&format!("{role}/{}", checkpoint::PAYLOAD_FILE), &dir.join(checkpoint::PAYLOAD_FILE))
}

fn same_vocab(model: &ToyLM, suite_vocab: &ssfo_core::Vocabulary, what: &str) -> Result<()> {
    if &model.vocab != suite_vocab {
        return Err(CliError::Config(format!("{what} vocabulary differs from the suite vocabulary")));
    }
    Ok(())
}

/// Builds the trap suite: `vocab.json`, `corpus.jsonl`, `probes.jsonl`, `tasks.jsonl`.
pub fn cmd_suite(cfg: &Config, out: &Path) -> Result<RunManifest> {
    let suite = build_trap_suite(&cfg.suite())?;
    let mut run = Run::start("suite", cfg, out)?;
    run.write(formats::VOCAB_FILE, &io::to_json_bytes(suite.vocab()))?;
    run.write(formats::CORPUS_FILE, &io::to_jsonl_bytes(&formats::corpus_lines(&suite.corpus)))?;
    run.write(formats::PROBES_FILE, &io::to_jsonl_bytes(&formats::probe_lines(&suite.probes)))?;
    run.write(formats::TASKS_FILE, &io::to_jsonl_bytes(&formats::task_lines(&suite.tasks)))?;
    run.finish()
}

/// MLE pretraining from a seeded random initialization.
pub fn cmd_pretrain(cfg: &Config, suite_dir: &Path, out: &Path) -> Result<RunManifest> {
    let suite = load_suite(suite_dir)?;
    let init = ToyLM::random(suite.vocab.clone(), cfg.hidden_dim, &mut rng::stream(cfg.seed, "init"))?;
    let (model, log) = pretrain_mle(&init, &suite.corpus, &cfg.pretrain())?;
    let mut run = Run::start("pretrain", cfg, out)?;
    for (role, path) in &suite.paths {
        run.input(role, path)?;
    }
    record_checkpoint(&mut run, &model)?;
    run.write(PRETRAIN_LOG_FILE, log.to_csv().as_bytes())?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub n_tasks: usize,
    pub retained: usize,
    pub dropped: usize,
    pub retained_fraction: f64,
}

/// Samples `n_tasks` preference pairs (suite tasks cycled) and drops refusals.
pub fn cmd_genpairs(cfg: &Config, suite_dir: &Path, model_dir: &Path, out: &Path) -> Result<RunManifest> {
    let suite = load_suite(suite_dir)?;
    let model = checkpoint::load(model_dir, "pretrain")?;
    same_vocab(&model, &suite.vocab, "model")?;
    let tasks = repeat_tasks(&suite.tasks, cfg.n_tasks);
    let generation = generate_pairs(&model, &tasks, &cfg.sampling())?;
    let summary = GenerationSummary {
        n_tasks: tasks.len(),
        retained: generation.retained,
        dropped: generation.dropped,
        retained_fraction: generation.retained_fraction(),
    };
    let lines: Vec<PairLine> = generation.pairs.iter().map(PairLine::from).collect();
    let mut run = Run::start("gen-pairs", cfg, out)?;
    for (role, path) in &suite.paths {
        run.input(role, path)?;
    }
    record_checkpoint_inputs(&mut run, "model", model_dir)?;
    run.write(formats::PAIRS_FILE, &io::to_jsonl_bytes(&lines))?;
    run.write(GENERATION_FILE, &io::to_json_bytes(&summary))?;
    run.finish()
}

fn load_pairs(pairs_dir: &Path, model: &ToyLM) -> Result<(PathBuf, Vec<PreferencePair>)> {
    let path = io::require(pairs_dir.join(formats::PAIRS_FILE), "gen-pairs")?;
    let pairs = formats::read_pairs(&path, &model.vocab)?;
    Ok((path, pairs))
}

fn write_alignment(
    cfg: &Config,
    alignment: &Alignment,
    model_dir: &Path,
    pairs_path: &Path,
    out: &Path,
) -> Result<RunManifest> {
    let mut run = Run::start("align", cfg, out)?;
    record_checkpoint_inputs(&mut run, "model", model_dir)?;
    run.input("pairs/pairs.jsonl", pairs_path)?;
    record_checkpoint(&mut run, &alignment.policy)?;
    run.write(TRAJECTORY_FILE, alignment.log.to_csv().as_bytes())?;
    run.finish()
}

/// Preference optimization of a pretrained checkpoint on generated pairs.
pub fn cmd_align(cfg: &Config, model_dir: &Path, pairs_dir: &Path, out: &Path) -> Result<RunManifest> {
    let model = checkpoint::load(model_dir, "pretrain")?;
    let (pairs_path, pairs) = load_pairs(pairs_dir, &model)?;
    let alignment = align(&model, &pairs, &cfg.align()?)?;
    write_alignment(cfg, &alignment, model_dir, &pairs_path, out)
}

/// Displacement between two checkpoints on the suite probes, plus the
/// theory-mode ordering check on the `before` model.
pub fn cmd_probe(cfg: &Config, suite_dir: &Path, before_dir: &Path, after_dir: &Path, out: &Path) -> Result<RunManifest> {
    let suite = load_suite(suite_dir)?;
    let before = checkpoint::load(before_dir, "pretrain")?;
    let after = checkpoint::load(after_dir, "align")?;
    same_vocab(&before, &suite.vocab, "before model")?;
    same_vocab(&after, &suite.vocab, "after model")?;
    let report = measure_displacement(&before, &after, &suite.probes)?;
    let loss = LossConfig::new(cfg.beta, cfg.lambda)?;
    let ordering = verify_eq3_ordering(&before, &suite.probes, &loss, cfg.probe_eta)?;
    let mut run = Run::start("probe", cfg, out)?;
    for (role, path) in &suite.paths {
        run.input(role, path)?;
    }
    record_checkpoint_inputs(&mut run, "before", before_dir)?;
    record_checkpoint_inputs(&mut run, "after", after_dir)?;
    run.write(DISPLACEMENT_FILE, &io::to_json_bytes(&report))?;
    run.write(DISPLACEMENT_CSV_FILE, report.to_csv().as_bytes())?;
    run.write(ORDERING_FILE, &io::to_json_bytes(&ordering))?;
    run.finish()
}

/// Greedy answers to the with-context prompts, scored against the gold answers.
pub fn greedy_records(model: &ToyLM, tasks: &[Task], max_len: usize) -> Result<Vec<EvalRecord>> {
    let vocab = &model.vocab;
    tasks
        .par_iter()
        .map(|t| {
            let output = model.greedy(&build_prompt_with_context(vocab, t), max_len)?;
            Ok(EvalRecord {
                prediction: vocab.detokenize(&output),
                references: vec![vocab.detokenize(&t.gold_context_answer)],
                satisfaction: None,
            })
        })
        .collect()
}

/// What `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// Prediction records in JSONL.
    Records(PathBuf),
    /// Greedy decoding of a checkpoint on the suite tasks.
    Model { suite: PathBuf, model: PathBuf },
}

pub fn cmd_eval(cfg: &Config, source: &EvalSource, out: &Path) -> Result<(RunManifest, EvalSummary)> {
    let (records, inputs): (Vec<EvalRecord>, Vec<(String, PathBuf)>) = match source {
        EvalSource::Records(path) => {
            if !path.is_file() {
                return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            let records: Vec<EvalRecord> = io::read_jsonl(path)?;
            let numbers = io::jsonl_line_numbers(path)?;
            for (r, n) in records.iter().zip(numbers) {
                r.validate().map_err(|e| CliError::Schema { path: path.clone(), line: n, message: e.to_string() })?;
            }
            (records, vec![("records".into(), path.clone())])
        }
        EvalSource::Model { suite, model } => {
            let files = load_suite(suite)?;
            let lm = checkpoint::load(model, "pretrain")?;
            same_vocab(&lm, &files.vocab, "model")?;
            let mut inputs: Vec<(String, PathBuf)> = files.paths.iter().map(|(r, p)| (r.to_string(), p.clone())).collect();
            inputs.push(("model/model.json".into(), model.join(checkpoint::MANIFEST_FILE)));
            inputs.push(("model/model.bin".into(), model.join(checkpoint::PAYLOAD_FILE)));
            (greedy_records(&lm, &files.tasks, cfg.max_len)?, inputs)
        }
    };
    let (summary, _) = summarize(&records)?;
    let mut run = Run::start("eval", cfg, out)?;
    for (role, path) in &inputs {
        run.input(role, path)?;
    }
    run.write(PREDICTIONS_FILE, &io::to_jsonl_bytes(&records))?;
    run.write(METRICS_FILE, &io::to_json_bytes(&summary))?;
    Ok((run.finish()?, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub span_em: f64,
    pub mean_dp_zc: f64,
    pub mean_dp_zp: f64,
    pub pearson_r: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Pearson r between λ and span EM; degenerate for a single λ.
    pub trend_r: Correlation,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{:?},{},{},{},{}\n", r.lambda, r.span_em, r.mean_dp_zc, r.mean_dp_zp, r.pearson_r));
        }
        out
    }
}

pub fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda:?}")
}

/// One point of the sweep: align, evaluate, measure.
pub fn sweep_point(
    cfg: &Config,
    lambda: f64,
    model: &ToyLM,
    pairs: &[PreferencePair],
    tasks: &[Task],
    probes: &[TrapProbe],
) -> Result<(Alignment, SweepRow)> {
    let train: TrainConfig = cfg.align_at(lambda)?;
    let alignment = align(model, pairs, &train)?;
    let (summary, _) = summarize(&greedy_records(&alignment.policy, tasks, cfg.max_len)?)?;
    let report: DisplacementReport = measure_displacement(model, &alignment.policy, probes)?;
    let row = SweepRow {
        lambda,
        span_em: summary.span_em,
        mean_dp_zc: report.mean_dp_zc,
        mean_dp_zp: report.mean_dp_zp,
        pearson_r: report.pearson_r,
    };
    Ok((alignment, row))
}

/// Aligns the same checkpoint on the same pairs once per λ. Each point writes
/// its own subdirectory; the table is merged in input order afterwards.
pub fn cmd_sweep_lambda(
    cfg: &Config,
    suite_dir: &Path,
    model_dir: &Path,
    pairs_dir: &Path,
    out: &Path,
) -> Result<(RunManifest, SweepReport)> {
    if cfg.lambdas.is_empty() {
        return Err(CliError::Config("lambda list is empty".into()));
    }
    for (i, &l) in cfg.lambdas.iter().enumerate() {
        cfg.align_at(l)?;
        if cfg.lambdas[..i].contains(&l) {
            return Err(CliError::Config(format!("lambda {l} listed twice")));
        }
    }
    let suite = load_suite(suite_dir)?;
    let model = checkpoint::load(model_dir, "pretrain")?;
    same_vocab(&model, &suite.vocab, "model")?;
    let (pairs_path, pairs) = load_pairs(pairs_dir, &model)?;
    io::ensure_dir(out)?;
    let rows: Vec<SweepRow> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let (alignment, row) = sweep_point(cfg, lambda, &model, &pairs, &suite.tasks, &suite.probes)?;
            let point_cfg = Config {
                mode: cfg.align_at(lambda)?.mode,
                lambda,
                lambdas: vec![lambda],
                ..cfg.clone()
            };
            write_alignment(&point_cfg, &alignment, model_dir, &pairs_path, &out.join(lambda_dir_name(lambda)))?;
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let ems: Vec<f64> = rows.iter().map(|r| r.span_em).collect();
    let trend_r = if rows.len() < 2 { Correlation::Degenerate } else { pearson(&lambdas, &ems)? };
    let report = SweepReport { rows, trend_r };

    let mut run = Run::start("sweep-lambda", cfg, out)?;
    for (role, path) in &suite.paths {
        run.input(role, path)?;
    }
    record_checkpoint_inputs(&mut run, "model", model_dir)?;
    run.input("pairs/pairs.jsonl", &pairs_path)?;
    for &l in &lambdas {
        let sub = lambda_dir_name(l);
        for name in [checkpoint::MANIFEST_FILE, checkpoint::PAYLOAD_FILE, TRAJECTORY_FILE] {
            run.record(&format!("{sub}/{name}"))?;
        }
    }
    run.write(SWEEP_CSV_FILE, report.to_csv().as_bytes())?;
    run.write(SWEEP_JSON_FILE, &io::to_json_bytes(&report))?;
    Ok((run.finish()?, report))
}
