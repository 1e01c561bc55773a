//! canonflow: lattice flows for canonical maps on twisted torus bundles.
//!
//! One structured TOML config drives every subcommand; flags of the same
//! name win over file keys. Exit codes: 0 success, 1 configuration or
//! verification failure, 2 flow termination (the admissibility monitor
//! tripped before the iteration budget ran out).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod experiment;
mod flow;
mod gauge;
mod heat;
mod report;
mod spectrum;
mod verify;

use experiment::Experiment;

#[derive(Parser)]
#[command(name = "canonflow", version = canonflow::build_version())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML), or a manifest.json from a previous run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run a single seed, overriding the config's seed list.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config override as key=value (dotted paths reach nested tables);
    /// repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured flow for every seed and write traces.
    Flow(CommonArgs),
    /// Measure module invariants and fail on any violation.
    Verify {
        /// grassmann, dynamics, spectral, or geometry; all four when omitted.
        #[arg(long)]
        suite: Option<String>,
        /// Corrupt an input on purpose; the named invariant must catch it.
        #[arg(long, value_enum)]
        inject: Option<Injection>,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Heat-kernel reconstruction errors over the configured time list.
    Heat(CommonArgs),
    /// Low end of the configured operator's spectrum.
    Spectrum {
        /// Operator: dbar or full.
        #[arg(long, default_value = "dbar")]
        kind: String,
        /// How many eigenvalues to report.
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Gauge invariance and equivariance checks on a seeded triple.
    GaugeCheck(CommonArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Injection {
    /// Make the metric non-Hermitian before the suites run.
    MetricNonhermitian,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Flow(args) => flow::cmd_flow(&Experiment::assemble(&args)?),
        Cmd::Verify { suite, inject, args } => {
            verify::cmd_verify(suite.as_deref(), inject, &Experiment::assemble(&args)?)
        }
        Cmd::Heat(args) => heat::cmd_heat(&Experiment::assemble(&args)?),
        Cmd::Spectrum { kind, count, args } => {
            spectrum::cmd_spectrum(&kind, count, &Experiment::assemble(&args)?)
        }
        Cmd::GaugeCheck(args) => gauge::cmd_gauge_check(&Experiment::assemble(&args)?),
    }
}
