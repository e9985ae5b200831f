//! `pacmpdm`: train, check, simulate and evaluate the merge planner from the shell.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pacmpdm", version, about = "Passive actor-critic training and multipolicy merge planning")]
struct Cli {
    /// Seed for every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config; keys left out keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    /// Random congested traffic from the configured preset.
    Preset,
    /// Scripted gap-closing follower.
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchmarkName {
    #[value(name = "1d")]
    OneD,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the merge value function; writes checkpoint.txt and metrics.csv.
    Train {
        /// Passive dataset; simulated demonstrations are used when omitted.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Solve the benchmark on a grid and compare a learner trained on passive samples.
    Oracle {
        #[arg(long, value_enum, default_value = "1d")]
        benchmark: BenchmarkName,
    },
    /// Roll out episodes and write per-step decision logs.
    Simulate {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "preset")]
        scenario: Scenario,
        /// mpdm, fixed-spot-<k> or human-replay.
        #[arg(long, default_value = "mpdm")]
        policy: String,
        /// Episodes for the preset scenario.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Compare MPDM against every fixed-spot baseline.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Overrides the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Turn a raw trajectory CSV into a passive dataset.
    Ingest {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// meters or feet; overrides the config.
        #[arg(long)]
        units: Option<String>,
    },
    /// Write simulated demonstrations as a noisy raw trajectory CSV.
    Corpus {
        /// Demonstration episodes; defaults to the configured training count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Position measurement noise (m).
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Print the effective configuration as JSON; its digest is the header's config hash.
    Config,
    /// Run every finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = pacmpdm::gradcheck::DEFAULT_PROBES)]
        probes: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::Context::new(cli.config.as_deref(), cli.seed, &cli.out).and_then(|ctx| match cli.command {
        Command::Train { dataset } => commands::train(&ctx, dataset.as_deref()),
        Command::Oracle { benchmark: BenchmarkName::OneD } => commands::oracle(&ctx),
        Command::Simulate { checkpoint, scenario, policy, episodes } => {
            commands::simulate(&ctx, checkpoint.as_deref(), scenario == Scenario::Switch, &policy, episodes)
        }
        Command::Evaluate { checkpoint, episodes } => commands::evaluate(&ctx, &checkpoint, episodes),
        Command::Ingest { input, units } => commands::ingest(&ctx, &input, units.as_deref()),
        Command::Corpus { episodes, noise } => commands::corpus(&ctx, episodes, noise),
        Command::Config => commands::print_config(&ctx),
        Command::Gradcheck { probes } => commands::gradcheck(&ctx, probes),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
