use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssfo_cli::commands::{self, EvalSource};
use ssfo_cli::{CliError, Config};

#[derive(Debug, Parser)]
#[command(name = "ssfo", version, about = "Self-supervised faithfulness optimization at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration override, `KEY=VALUE`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the memorization-trap suite.
    Suite {
        #[command(flatten)]
        common: Common,
    },
    /// MLE pretraining on the suite corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: PathBuf,
    },
    /// Sample self-supervised preference pairs.
    GenPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: PathBuf,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        model: PathBuf,
    },
    /// Preference optimization on generated pairs.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory holding pairs.jsonl.
        #[arg(long)]
        pairs: PathBuf,
        /// dpo, ssfo or ssfo_lambda.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Likelihood displacement between two checkpoints.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Score prediction records, or greedy answers of a checkpoint on the suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["suite", "model"])]
        records: Option<PathBuf>,
        #[arg(long, requires = "model")]
        suite: Option<PathBuf>,
        #[arg(long, requires = "suite")]
        model: Option<PathBuf>,
    },
    /// Align once per λ and tabulate span EM and displacement.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Comma-separated, each >= 1.
        #[arg(long)]
        lambdas: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for spec in &common.overrides {
        cfg.apply_override(spec)?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(out: &Path, what: &str) {
    println!("{what} written to {}", out.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Suite { common } => {
            let cfg = resolve(&common, &[])?;
            commands::cmd_suite(&cfg, &common.out)?;
            report(&common.out, "suite");
        }
        Command::Pretrain { common, suite } => {
            let cfg = resolve(&common, &[])?;
            commands::cmd_pretrain(&cfg, &suite, &common.out)?;
            report(&common.out, "checkpoint");
        }
        Command::GenPairs { common, suite, model } => {
            let cfg = resolve(&common, &[])?;
            commands::cmd_genpairs(&cfg, &suite, &model, &common.out)?;
            report(&common.out, "pairs");
        }
        Command::Align { common, model, pairs, mode, lambda } => {
            let cfg = resolve(&common, &[("mode", mode), ("lambda", lambda.map(|l| l.to_string()))])?;
            commands::cmd_align(&cfg, &model, &pairs, &common.out)?;
            report(&common.out, "aligned checkpoint");
        }
        Command::Probe { common, suite, before, after } => {
            let cfg = resolve(&common, &[])?;
            commands::cmd_probe(&cfg, &suite, &before, &after, &common.out)?;
            report(&common.out, "displacement report");
        }
        Command::Eval { common, records, suite, model } => {
            let cfg = resolve(&common, &[])?;
            let source = match (records, suite, model) {
                (Some(r), _, _) => EvalSource::Records(r),
                (None, Some(suite), Some(model)) => EvalSource::Model { suite, model },
                _ => return Err(CliError::Config("eval needs --records, or --suite with --model".into())),
            };
            let (_, summary) = commands::cmd_eval(&cfg, &source, &common.out)?;
            println!(
                "span_em {:.4} rouge1 {:.4} rouge2 {:.4} rougeL {:.4} n {}",
                summary.span_em, summary.rouge1_f1, summary.rouge2_f1, summary.rouge_l_f1, summary.n
            );
        }
        Command::SweepLambda { common, suite, model, pairs, lambdas } => {
            let cfg = resolve(&common, &[("lambdas", lambdas)])?;
            let (_, sweep) = commands::cmd_sweep_lambda(&cfg, &suite, &model, &pairs, &common.out)?;
            print!("{}", sweep.to_csv());
            println!("trend r {}", sweep.trend_r);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
