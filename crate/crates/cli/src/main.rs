//! `seqwarm`: train, tune, compare and summarize sequence-length-warmup runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 divergence, 4 tuning failure. `SEQWARM_LOG=steps` prints every step
//! record to stderr; `SEQWARM_LOG=eval` only those with a validation value.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use seqwarm::data::synthetic_corpus;
use seqwarm::experiment::{compare, tune_experiment, Grid};
use seqwarm::metrics::MetricRecord;
use seqwarm::report::report_data;
use seqwarm::train::run_with;
use seqwarm::{Error, ExperimentConfig, RunStatus};

#[derive(Parser)]
#[command(name = "seqwarm", version, about = "Sequence length warmup experiments")]
struct Cli {
    /// On failure, print a JSON error object to stderr.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config (or a previous run's manifest.json).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `lr_schedule.peak=6e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the pacing start length and duration with short probes.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of configs and seeds and tabulate their instability.
    Compare {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate run directories into analysis CSVs.
    ReportData {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic text corpus.
    GenCorpus {
        #[arg(long)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Error(Error),
    Diverged { step: u64, loss: f64 },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Diverged { .. } => 3,
            Failure::Error(Error::Config(_)) => 2,
            Failure::Error(Error::Diverged { .. }) => 3,
            Failure::Error(Error::TuningFailed(_)) => 4,
            Failure::Error(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self.code() {
            2 => "config",
            3 => "diverged",
            4 => "tuning_failed",
            _ => "error",
        }
    }

    fn messages(&self) -> Vec<String> {
        match self {
            Failure::Diverged { step, loss } => {
                vec![format!("training diverged at step {step} (loss {loss})")]
            }
            Failure::Error(Error::Config(problems)) => problems.clone(),
            Failure::Error(e) => vec![e.to_string()],
        }
    }
}

fn progress_logger() -> impl FnMut(&MetricRecord) {
    let mode = std::env::var("SEQWARM_LOG").unwrap_or_default();
    move |r: &MetricRecord| {
        let show = match mode.as_str() {
            "steps" => true,
            "eval" => r.val_ppl.is_some(),
            _ => false,
        };
        if show {
            let val = r.val_ppl.map(|v| format!(" val_ppl={v:.4}")).unwrap_or_default();
            eprintln!(
                "step={} tokens={} L={} bsz={} lr={:.3e} loss={:.4} ratio={:.3}{val}",
                r.step, r.tokens_consumed, r.seqlen_t, r.batch_size, r.lr, r.train_loss, r.loss_ratio
            );
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, set, out } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            let tokens = cfg.corpus.load_tokens()?;
            let summary = run_with(&cfg, tokens, &out, progress_logger())?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
            if summary.status == RunStatus::Diverged {
                let d = summary.divergence.expect("diverged runs record where");
                return Err(Failure::Diverged {
                    step: d.step,
                    loss: d.loss,
                });
            }
        }
        Command::Tune { config, set, out } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            let tokens = cfg.corpus.load_tokens()?;
            let (result, _) = tune_experiment(&cfg, &tokens, &out)?;
            println!(
                "seqlen_start={} duration={} probes={} probe_steps={}{}",
                result.chosen_seqlen_start,
                result.chosen_duration,
                result.trials.len(),
                result.total_probe_steps(),
                if result.non_monotone {
                    " (non-monotone; duration chosen by linear scan)"
                } else {
                    ""
                }
            );
        }
        Command::Compare { grid, out } => {
            let (grid, runs) = Grid::load(&grid)?;
            let report = compare(&runs, grid.threshold, &out, |row| {
                eprintln!(
                    "{} seed={} status={:?} spikes={} final_val_ppl={}",
                    row.label,
                    row.seed,
                    row.status,
                    row.spikes,
                    row.final_val_ppl.map_or("-".into(), |v| format!("{v:.4}"))
                );
            })?;
            let mut stdout = std::io::stdout().lock();
            for c in &report.cells {
                let _ = writeln!(
                    stdout,
                    "{:<24} runs={} diverged={} median_spikes>{}={} median_val_ppl={}",
                    c.label,
                    c.runs,
                    c.diverged,
                    report.threshold,
                    c.median_spikes,
                    c.median_final_val_ppl.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            for p in &report.pairs {
                let _ = writeln!(
                    stdout,
                    "{} vs {}: fewer spikes: {}, lower val ppl: {}",
                    p.a,
                    p.b,
                    p.fewer_spikes.as_deref().unwrap_or("tie"),
                    p.lower_val_ppl.as_deref().unwrap_or("tie")
                );
            }
        }
        Command::ReportData { dirs, out } => {
            for path in report_data(&dirs, &out)? {
                println!("{}", path.display());
            }
        }
        Command::GenCorpus { bytes, seed, out } => {
            std::fs::write(&out, synthetic_corpus(seed, bytes)).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if cli.error_json {
                let obj = json!({"error": f.kind(), "exit_code": f.code(), "messages": f.messages()});
                eprintln!("{obj}");
            } else {
                for m in f.messages() {
                    eprintln!("error: {m}");
                }
            }
            ExitCode::from(f.code())
        }
    }
}
