//! `casu-sim`: scenario runner and report emitter for the monitored-MCU
//! simulator.
//!
//! Three verbs cover the tool's jobs: `run` executes a protocol scenario and
//! checks its expectations, `check-hw` re-verifies the hardware monitor's
//! safety properties by enumeration, and `measure-scaling` counts hash
//! compressions per update phase across image sizes. Machine-readable output
//! goes to stdout (JSON or CSV); human summaries go to stderr. Exit status is
//! zero only when every expectation or property holds.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use casu_core::layout::{LayoutConfig, MemoryLayout};
use casu_core::monitor::{self, CheckOptions, MonitorConfig};
use casu_core::scenario::{self, Scenario};

#[derive(Parser)]
#[command(name = "casu-sim", version, about = "Deterministic simulator for a hardware-monitored MCU and its authenticated update protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file; exit 0 only if all its expectations hold.
    Run {
        /// Scenario JSON path.
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full report JSON here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Enumerate the monitor FSM against its safety properties.
    CheckHw {
        /// Layout config JSON; the built-in default layout when absent.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Enumerate every address instead of the boundary classes
        /// (practical only for compact layouts).
        #[arg(long)]
        full_enumeration: bool,
    },
    /// Emit `size,auth_compressions,install_compressions` CSV rows.
    MeasureScaling {
        /// Comma-separated serialized image sizes in bytes.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, seed, report } => run_scenario(&scenario, seed, report.as_deref()),
        Command::CheckHw { layout, full_enumeration } => check_hw(layout.as_deref(), full_enumeration),
        Command::MeasureScaling { sizes } => measure_scaling(&sizes),
    }
}

fn run_scenario(
    path: &std::path::Path,
    seed: Option<u64>,
    report_path: Option<&std::path::Path>,
) -> Result<bool> {
    let mut scenario = Scenario::load(path)
        .with_context(|| format!("loading scenario {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let report = scenario::run(&scenario).context("running scenario")?;

    for e in &report.expectations {
        let status = if e.pass { "PASS" } else { "FAIL" };
        eprintln!(
            "{status} {} (actual: {})",
            serde_json::to_string(&e.expectation)?,
            e.actual
        );
    }
    eprintln!(
        "{}: {} steps, {} transmissions, confirmed_version={}",
        report.name,
        report.steps.len(),
        report.transcript.len(),
        report.final_state.confirmed_version
    );

    let json = serde_json::to_string_pretty(&report)?;
    match report_path {
        Some(path) => std::fs::write(path, json)
            .with_context(|| format!("writing report to {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(report.passed)
}

fn check_hw(layout_path: Option<&std::path::Path>, full_enumeration: bool) -> Result<bool> {
    let layout = match layout_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading layout {}", path.display()))?;
            LayoutConfig::from_json(&text)
                .context("parsing layout config")?
                .validate()
                .context("validating layout")?
        }
        None => MemoryLayout::default_layout(),
    };

    let cfg = MonitorConfig::from_layout(&layout);
    let samples = monitor::default_er_samples(&layout);
    let opts = CheckOptions {
        full_enumeration,
        ..Default::default()
    };
    let report = monitor::check_properties(&cfg, layout.pmem(), &samples, &opts)
        .context("running property check")?;

    eprintln!(
        "checked {} cases over {} region samples in {} ms: {} counterexamples",
        report.cases,
        samples.len(),
        report.elapsed_ms,
        report.counterexamples.len()
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.is_clean())
}

fn measure_scaling(sizes: &[usize]) -> Result<bool> {
    let rows = scenario::measure_scaling(sizes).context("measuring")?;
    println!("size,auth_compressions,install_compressions");
    for row in rows {
        println!(
            "{},{},{}",
            row.size, row.auth_compressions, row.install_compressions
        );
    }
    Ok(true)
}
