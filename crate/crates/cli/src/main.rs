//! `dmoe`: end-to-end pipeline driver.
//!
//! Typical flow:
//!   dmoe gen-corpus -> pretrain-base -> probe -> cluster -> extend ->
//!   train (+ train-baseline) -> eval -> report
//!
//! Exit codes: 0 success, 1 validation error, 2 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use dmoe_core::config::{load_config, RUN_DIR_ENV};
use dmoe_core::pipeline::{
    stage_adapt, stage_cluster, stage_eval, stage_extend, stage_gen_corpus,
    stage_pretrain_base, stage_probe, stage_report, stage_route_stats, stage_train,
    stage_train_baseline, AdaptMethod,
};
use dmoe_core::{DmoeError, Result};

#[derive(Parser)]
#[command(name = "dmoe", version, about = "Dynamic mixture-of-experts pipeline on synthetic languages")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set extension.alpha=0.0 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (env DMOE_RUN_DIR, then config run_dir).
    #[arg(long, global = true, env = RUN_DIR_ENV)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus.
    GenCorpus,
    /// Pretrain the dense base model on the multilingual mix.
    PretrainBase,
    /// Compute per-language parameter-deviation fingerprints.
    Probe {
        /// Probe only these languages (default: all non-adaptation languages).
        #[arg(long)]
        lang: Vec<String>,
    },
    /// Build the similarity matrix and the balanced group assignment.
    Cluster {
        /// Use an existing similarity CSV instead of stored deviations.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Number of groups (default: extension.num_experts).
        #[arg(long)]
        k: Option<usize>,
        /// Write the assignment here instead of groups/assignment.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extend the top-deviation layers of the base model to MoE.
    Extend,
    /// Two-stage DMoE training.
    Train,
    /// Dense continual-pretraining baseline at the same token budget.
    TrainBaseline,
    /// Adapt one held-out language (expert scoring, graft, fine-tune).
    Adapt {
        /// Language code (default: the first adaptation language).
        #[arg(long)]
        lang: Option<String>,
        /// dla (frozen-model expert copy) or lapt (full fine-tune).
        #[arg(long, default_value = "dla")]
        method: String,
    },
    /// Held-out perplexity report for a named checkpoint.
    Eval {
        /// Checkpoint name under run_dir/checkpoints (e.g. dmoe, dense_baseline).
        #[arg(long, default_value = "dmoe")]
        model: String,
        /// soft (top-2) or hard-expert=N.
        #[arg(long, default_value = "soft")]
        routing: String,
    },
    /// Router top-1 distribution per language and MoE layer.
    RouteStats {
        #[arg(long, default_value = "dmoe")]
        model: String,
    },
    /// Compare two stored eval reports.
    Report {
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        candidate: String,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    DmoeError::validation(format!("--set expects KEY=VALUE, got {item:?}"))
                })
        })
        .collect()
}

fn run(cli: Cli) -> Result<String> {
    let overrides = parse_overrides(&cli.overrides)?;
    let cfg = load_config(cli.config.as_deref(), &overrides, cli.seed, cli.run_dir)?;
    match cli.command {
        Command::GenCorpus => stage_gen_corpus(&cfg),
        Command::PretrainBase => stage_pretrain_base(&cfg),
        Command::Probe { lang } => {
            let langs = if lang.is_empty() { None } else { Some(lang) };
            stage_probe(&cfg, langs.as_deref())
        }
        Command::Cluster { matrix, k, out } => {
            stage_cluster(&cfg, matrix.as_deref(), k, out.as_deref())
        }
        Command::Extend => stage_extend(&cfg),
        Command::Train => stage_train(&cfg),
        Command::TrainBaseline => stage_train_baseline(&cfg),
        Command::Adapt { lang, method } => {
            let method = match method.as_str() {
                "dla" => AdaptMethod::Dla,
                "lapt" => AdaptMethod::Lapt,
                other => {
                    return Err(DmoeError::validation(format!(
                        "unknown adaptation method {other:?}; expected dla or lapt"
                    )))
                }
            };
            stage_adapt(&cfg, lang.as_deref(), method)
        }
        Command::Eval { model, routing } => stage_eval(&cfg, &model, &routing),
        Command::RouteStats { model } => stage_route_stats(&cfg, &model),
        Command::Report { baseline, candidate } => stage_report(&cfg, &baseline, &candidate),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
