//! `reqlens` command-line front end.
//!
//! Every subcommand reads one TOML run configuration (see `config.rs`), writes
//! its outputs atomically into the output directory and records a manifest
//! next to them. Failures print a single JSON object `{code, message,
//! location?}` on stderr; exit status is 0 on success, 1 for user errors and
//! 2 for internal errors.

mod commands;
mod config;
mod run;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use reqlens::lexstats::TextMode;

use crate::config::Overrides;
use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(
    author,
    version,
    about = "Request segmentation and expression analytics for chat logs"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for stochastic commands; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, triage-filter and spam-filter the corpus.
    Ingest,
    /// Check annotator responses (`{id, marked_text}` JSONL) for format errors.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Send the corpus to both annotators.
    Annotate,
    /// Split annotator outputs into agreed and queued records and build the
    /// training set.
    Triage {
        /// Large annotator results; defaults to `annotations_L.jsonl` in the
        /// output directory.
        #[arg(long)]
        large: Option<PathBuf>,
        /// Small annotator results; defaults to `annotations_l.jsonl`.
        #[arg(long)]
        small: Option<PathBuf>,
        #[arg(long)]
        delta: Option<usize>,
        /// Reviewer decisions for queued records.
        #[arg(long)]
        decisions: Option<PathBuf>,
        /// Gold annotations (`{id, marked_text}` JSONL).
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Turn segmentations into expression templates.
    Extract,
    /// Assign every template a taxonomy class.
    Classify,
    /// Per-user richness and formatting statistics.
    Stats {
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        mode: Option<TextMode>,
    },
    /// Richness distributions of the corpus against a reference corpus.
    Compare {
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        mode: Option<TextMode>,
    },
    /// Convergence curve of cohort users with a shuffled baseline.
    Converge {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// MTLD over time per model, for all users and for the cohort.
    Timelapse {
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        mode: Option<TextMode>,
    },
    /// Anchor-based categorization and a 2-D projection.
    Project {
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
    },
    /// Early and late dialog density maps of the cohort.
    Kde,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Validate { .. } => "validate",
            Command::Annotate => "annotate",
            Command::Triage { .. } => "triage",
            Command::Extract => "extract",
            Command::Classify => "classify",
            Command::Stats { .. } => "stats",
            Command::Compare { .. } => "compare",
            Command::Converge { .. } => "converge",
            Command::Timelapse { .. } => "timelapse",
            Command::Project { .. } => "project",
            Command::Kde => "kde",
        }
    }

    fn overrides(&self, cli: &Cli) -> Overrides {
        let mut o = Overrides {
            seed: cli.seed,
            out: cli.out.clone(),
            ..Default::default()
        };
        match self {
            Command::Triage { delta, .. } => o.delta = *delta,
            Command::Stats { window, mode } | Command::Compare { window, mode } => {
                o.window = *window;
                o.mode = *mode;
            }
            Command::Converge { k, trials } => {
                o.k = *k;
                o.trials = *trials;
            }
            Command::Timelapse { batch_size, mode } => {
                o.batch_size = *batch_size;
                o.mode = *mode;
            }
            Command::Project { tau } => o.tau = *tau,
            _ => {}
        }
        o
    }
}

fn error_json(code: &str, message: &str, location: Option<&str>) -> String {
    let mut v = json!({ "code": code, "message": message });
    if let Some(loc) = location {
        v["location"] = json!(loc);
    }
    v.to_string()
}

fn report(err: &anyhow::Error) -> ExitCode {
    if let Some(e) = err.downcast_ref::<CliError>() {
        eprintln!("{}", error_json(e.code, &e.message, e.location.as_deref()));
    } else if let Some(e) = err.downcast_ref::<reqlens::Error>() {
        eprintln!("{}", error_json(e.code(), &e.to_string(), e.location().as_deref()));
    } else {
        eprintln!("{}", error_json("internal", &format!("{err:#}"), None));
        return ExitCode::from(2);
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", error_json("usage", message.trim_end(), None));
            return ExitCode::from(1);
        }
    };
    panic::set_hook(Box::new(|info| {
        eprintln!("{}", error_json("internal", &info.to_string(), None));
    }));
    match panic::catch_unwind(AssertUnwindSafe(|| commands::dispatch(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => report(&e),
        Err(_) => ExitCode::from(2),
    }
}
