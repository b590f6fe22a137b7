//! `lmmclip` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 provider error, 4 replay fixture miss.

mod commands;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use lmmclip::config::SCHEMA;

use crate::errors::CliError;

#[derive(Debug, Parser)]
#[command(name = "lmmclip", version, about = "Training-free image classification with an LMM describer and text-embedding matching")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a configuration key (repeatable), e.g. `--set provider.burst=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    set: Vec<String>,

    /// Shorthand for `provider.kind`.
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,

    /// Shorthand for `provider.fixture_path`; the output file for `record`.
    #[arg(long, global = true, value_name = "PATH")]
    fixtures: Option<PathBuf>,

    /// Output directory for reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 4)]
    jobs: usize,

    /// Shorthand for `provider.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderArg {
    Live,
    Replay,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Classify one image and print the label, score and stage answers.
    Classify(ClassifyArgs),
    /// Evaluate a manifest and write report files.
    Eval(EvalArgs),
    /// Query a live provider for every manifest image and write a fixture file.
    Record(EvalArgs),
    /// Inspect or clear a response cache directory.
    Cache {
        #[command(subcommand)]
        action: CacheCmd,
    },
    /// Re-aggregate previously written report.json files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Class list file, one label per line.
    #[arg(long, value_name = "PATH")]
    pub classes: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Class list, as `PATH` (dataset id = file stem) or `DATASET=PATH`. Repeatable.
    #[arg(long, value_name = "[DATASET=]PATH", required = true, action = ArgAction::Append)]
    pub classes: Vec<String>,
    /// Tag a dataset with an averaging group, `DATASET=GROUP`. Repeatable.
    #[arg(long, value_name = "DATASET=GROUP", action = ArgAction::Append)]
    pub group: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum CacheCmd {
    /// Print record count and size.
    Stats {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
    /// Re-check every record's integrity and list corrupt keys.
    Verify {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
    /// Remove every record.
    Clear {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Confirm the deletion.
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files to combine.
    #[arg(required = true, value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_name = "DATASET=GROUP", action = ArgAction::Append)]
    pub group: Vec<String>,
}

/// Settings shared by every subcommand once parsing is done.
pub struct Globals {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub fixtures: Option<PathBuf>,
}

/// One `--<dotted.key>` flag per configuration key.
fn with_schema_flags(mut cmd: Command) -> Command {
    let mut listing = String::from("Configuration keys (each settable as --<key> VALUE or --set <key>=VALUE):\n");
    for (key, ty, help) in SCHEMA {
        listing.push_str(&format!("  {key:<36} {:<8} {help}\n", ty.name()));
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name(ty.name())
                .help(*help)
                .hide_short_help(true),
        );
    }
    cmd.after_long_help(listing)
}

fn dotted_overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let deepest = {
        let mut cur = m;
        while let Some((_, sub)) = cur.subcommand() {
            cur = sub;
        }
        cur
    };
    let mut out = Vec::new();
    for (key, _, _) in SCHEMA {
        let v = deepest
            .get_one::<String>(key)
            .or_else(|| m.get_one::<String>(key));
        if let Some(v) = v {
            out.push((key.to_string(), v.clone()));
        }
    }
    out
}

fn globals(cli: &Cli, dotted: Vec<(String, String)>) -> Result<Globals, CliError> {
    let mut overrides = Vec::new();
    if let Some(p) = cli.provider {
        let v = match p {
            ProviderArg::Live => "live",
            ProviderArg::Replay => "replay",
        };
        overrides.push(("provider.kind".to_string(), v.to_string()));
    }
    if let Some(f) = &cli.fixtures {
        if !matches!(cli.command, Cmd::Record(_)) {
            overrides.push(("provider.fixture_path".to_string(), f.display().to_string()));
        }
    }
    if let Some(s) = cli.seed {
        overrides.push(("provider.seed".to_string(), s.to_string()));
    }
    overrides.extend(dotted);
    for s in &cli.set {
        overrides.push(lmmclip::config::split_override(s)?);
    }
    Ok(Globals {
        config: cli.config.clone(),
        overrides,
        out: cli.out.clone(),
        jobs: cli.jobs.max(1),
        fixtures: cli.fixtures.clone(),
    })
}

fn run(cli: Cli, dotted: Vec<(String, String)>) -> Result<(), CliError> {
    let g = globals(&cli, dotted)?;
    match cli.command {
        Cmd::Classify(a) => commands::classify(&g, &a),
        Cmd::Eval(a) => commands::eval(&g, &a),
        Cmd::Record(a) => commands::record(&g, &a),
        Cmd::Cache { action } => commands::cache(&action),
        Cmd::Report(a) => commands::report(&g, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = with_schema_flags(Cli::command()).get_matches();
    let dotted = dotted_overrides(&matches);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

