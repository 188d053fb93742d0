//! `condense`: train, profile, prune, distill and report from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_manual_keep, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "condense", version, about = "Channel condensation and hinge pruning for U-net generators")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory holding checkpoints and reports.
    #[arg(long, global = true, value_name = "PATH")]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the generator with channel penalization.
    Train(TrainArgs),
    /// Write per-layer cost factors.
    Profile(ProfileArgs),
    /// Detect hinges and prune the condensed generator.
    Prune(PruneArgs),
    /// Fine-tune the pruned student against the condensed teacher.
    Distill(DistillArgs),
    /// Collect all artifacts in the workdir into one CSV.
    Report,
    /// Run train, profile, prune, distill and report in turn.
    Pipeline,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// uniform, linear or exponential.
    #[arg(long)]
    penal_strategy: Option<String>,
    /// high or low.
    #[arg(long)]
    regime: Option<String>,
    /// mac, latency or uniform.
    #[arg(long)]
    factor_source: Option<String>,
    /// Train without the channel penalty.
    #[arg(long)]
    no_penal: bool,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// mac, latency or uniform.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Generator checkpoint; defaults to the condensed checkpoint when present.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Forced keep count for one layer, e.g. `layer3=50`. Repeatable.
    #[arg(long, value_name = "layerN=K", value_parser = parse_manual_keep)]
    manual_keep: Vec<(String, usize)>,
    #[arg(long)]
    min_drop_ratio: Option<f64>,
    /// Condensed checkpoint to prune.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_name = "PATH")]
    student: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    teacher: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Profile(_) => "profile",
            Command::Prune(_) => "prune",
            Command::Distill(_) => "distill",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
        }
    }

    /// Applies command flags on top of the loaded configuration.
    fn apply(&self, c: &mut RunConfig) {
        match self {
            Command::Train(a) => {
                set(&mut c.train.epochs, a.epochs);
                set(&mut c.train.batch_size, a.batch_size);
                set(&mut c.train.learning_rate, a.learning_rate);
                set(&mut c.penal.strategy, a.penal_strategy.clone());
                set(&mut c.penal.regime, a.regime.clone());
                set(&mut c.penal.factor_source, a.factor_source.clone());
                if a.no_penal {
                    c.train.penalize = false;
                }
            }
            Command::Profile(a) => {
                set(&mut c.profile.source, a.source.clone());
                set(&mut c.profile.repeats, a.repeats);
            }
            Command::Prune(a) => {
                c.hinge.manual_keep.extend(a.manual_keep.iter().cloned());
                set(&mut c.hinge.min_drop_ratio, a.min_drop_ratio);
            }
            Command::Distill(a) => set(&mut c.distill.epochs, a.epochs),
            Command::Report | Command::Pipeline => {}
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    set(&mut config.seed, cli.seed);
    set(&mut config.paths.workdir, cli.workdir.clone());
    cli.command.apply(&mut config);
    config.validate()?;
    match &cli.command {
        Command::Train(_) => commands::train(&config),
        Command::Profile(a) => commands::profile(&config, a.checkpoint.as_deref()),
        Command::Prune(a) => commands::prune(&config, a.checkpoint.as_deref()),
        Command::Distill(a) => commands::distill(&config, a.student.as_deref(), a.teacher.as_deref()),
        Command::Report => commands::report(&config),
        Command::Pipeline => commands::pipeline(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {message}");
            eprintln!(
                "error kind={} command={} message=\"{}\"",
                e.kind(),
                cli.command.name(),
                message.replace('\\', "\\\\").replace('"', "\\\"")
            );
            ExitCode::FAILURE
        }
    }
}
