use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use neuropubsub::broker::PlacementPolicy;
use neuropubsub::harness::{self, Format, HarnessError, Scenario};

#[derive(Parser, Debug)]
#[command(name = "neuropubsub", version, about = "Simulate neural publish/subscribe scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scenario and emit its metrics report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Place every inference subscription and print placements with costs.
    Place {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        algorithm: Algorithm,
    },
    /// Run upstream and subscriber-side placement on the same workload.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Json => Format::Json,
            OutputFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Algorithm {
    Oracle,
    Upstream,
    Baseline,
}

impl From<Algorithm> for PlacementPolicy {
    fn from(a: Algorithm) -> Self {
        match a {
            Algorithm::Oracle => PlacementPolicy::Oracle,
            Algorithm::Upstream => PlacementPolicy::Upstream,
            Algorithm::Baseline => PlacementPolicy::Baseline,
        }
    }
}

fn load(path: &Path) -> anyhow::Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(harness::load_scenario(&text)?)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { scenario, seed, out, format } => {
            let report = harness::run(&load(&scenario)?, seed);
            let text = harness::emit(&report, format.into());
            match out {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Place { scenario, algorithm } => {
            let placed = harness::place_scenario(&load(&scenario)?, algorithm.into())?;
            println!("{}", serde_json::to_string_pretty(&placed)?);
        }
        Command::Compare { scenario, seed } => {
            let c = harness::compare(&load(&scenario)?, seed);
            eprintln!(
                "link KB: upstream {:.3}, baseline {:.3}; delivered: upstream {}, baseline {}",
                c.upstream.totals.link_kb, c.baseline.totals.link_kb, c.upstream.totals.delivered, c.baseline.totals.delivered
            );
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Command::Validate { scenario } => {
            load(&scenario)?;
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Scenario problems are the user's to fix; everything else is a runtime failure.
            match e.downcast_ref::<HarnessError>() {
                Some(HarnessError::Parse { .. } | HarnessError::Validation { .. }) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
