use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use slicecc_cli::{
    cmd_bounds, cmd_compare_fairness, cmd_simulate, cmd_solve, cmd_twin, load_scenario, parse_active, parse_rates,
    Overrides,
};
use slicecc_core::{BoundVariant, Mode, ScenarioError};

#[derive(Parser)]
#[command(name = "slicecc", version, about = "Delay-constrained rate control: simulate, solve and inspect bounds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Packet-level simulation; writes flows.csv, edges.csv, summary.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Add the fluid optimum and duality gap of every epoch to the summary.
        #[arg(long)]
        fluid: bool,
    },
    /// Fluid dual descent, with a brute-force check for up to three flows.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
        /// Oracle grid spacing, bits/second.
        #[arg(long, default_value_t = 1e5)]
        grid_bps: f64,
    },
    /// Every bound variant per flow, at given rates or at the fluid optimum.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
        /// Comma-separated bits/second, one per active flow in id order.
        #[arg(long)]
        rates: Option<String>,
    },
    /// Equal split against the solver allocation, with per-flow verdicts.
    CompareFairness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Reactive and proactive runs on one seed, with a per-join transient report.
    Twin {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bound_variant: Option<BoundVariant>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct Select {
    /// Comma-separated flow ids to treat as active; default all.
    #[arg(long)]
    active: Option<String>,
}

impl Common {
    fn load(&self) -> Result<slicecc_core::Scenario> {
        let ov = Overrides {
            seed: self.seed,
            bound_variant: self.bound_variant,
            mode: self.mode,
            duration_s: self.duration,
        };
        load_scenario(&self.scenario, &ov)
    }
}

fn print(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { common, out, fluid } => print(&cmd_simulate(&common.load()?, &out, fluid)?),
        Cmd::Solve { common, select, grid_bps } => {
            let sc = common.load()?;
            let active = parse_active(select.active.as_deref(), &sc)?;
            print(&cmd_solve(&sc, active, grid_bps)?)
        }
        Cmd::Bounds { common, select, rates } => {
            let sc = common.load()?;
            let active = parse_active(select.active.as_deref(), &sc)?;
            let rates = rates.map(|r| parse_rates(&r, &active, sc.flows.len())).transpose()?;
            print(&cmd_bounds(&sc, active, rates)?)
        }
        Cmd::CompareFairness { common, select } => {
            let sc = common.load()?;
            let active = parse_active(select.active.as_deref(), &sc)?;
            print(&cmd_compare_fairness(&sc, active)?)
        }
        Cmd::Twin { common, out } => print(&cmd_twin(&common.load()?, &out)?),
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    kind: &'a str,
}

fn report(kind: &str, message: &str) {
    let line = ErrorLine { error: message, kind };
    eprintln!("{}", serde_json::to_string(&line).unwrap_or_else(|_| message.to_string()));
}

fn kind_of(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<ScenarioError>() {
        return match e {
            ScenarioError::Io { .. } => "io",
            ScenarioError::Parse(_) => "parse",
            ScenarioError::Invalid(_) => "invalid",
        };
    }
    if err.chain().any(|c| c.is::<std::io::Error>() || c.is::<csv::Error>()) {
        return "io";
    }
    "runtime"
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        let kind = c
            .downcast_ref::<std::io::Error>()
            .map(|e| e.kind())
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(|e| e.io_error_kind()));
        kind == Some(std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // reader went away (e.g. piped into head); nothing left to report to
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            report(kind_of(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
