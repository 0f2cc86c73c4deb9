use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use govsim::analytics::{compute_legs, detect_drift, export_report, LegCatalog, ObservedState, ReportFormat};
use govsim::envelope::TelemetryEnvelope;
use govsim::runner::{run_scenario, RunError, RunOptions};
use govsim::scenario::{load_config, ConfigError};
use govsim::storage::{load_dir, StoreKind};
use govsim::time::{SimClock, WallClock};

#[derive(Parser)]
#[command(name = "govsim", version, about = "Governance pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to quiescence and write its outputs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pace the run against real time instead of simulated time.
        #[arg(long)]
        wall_clock: bool,
        /// Compute legs, assessments and incidents at the end of the run.
        #[arg(long)]
        inline_analytics: bool,
    },
    /// Leg statistics over a persisted store directory.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        legs: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        boxplot: PathBuf,
    },
    /// Compare a scenario's desired state with an observed snapshot.
    Drift {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        observed: PathBuf,
    },
}

/// Exit 1: the inputs are wrong. Exit 2: the run itself failed.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(ref issues) => {
                let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
                Self::Invalid(anyhow::anyhow!("invalid scenario:\n{}", lines.join("\n")))
            }
            other => Self::Invalid(other.into()),
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn run(
    scenario: &Path,
    out: &Path,
    seed: Option<u64>,
    wall_clock: bool,
    inline_analytics: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(scenario)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let opts = RunOptions { inline_analytics };
    let start = cfg.start_instant();
    let outcome = if wall_clock {
        run_scenario(&cfg, &WallClock::anchored_at(start), opts)
    } else {
        run_scenario(&cfg, &SimClock::starting_at(start), opts)
    };
    let outcome = outcome.map_err(|e| match e {
        RunError::InvalidConfig(c) => Failure::from(c),
        other => runtime(other),
    })?;
    outcome
        .write_outputs(out)
        .with_context(|| format!("writing outputs to {}", out.display()))
        .map_err(Failure::Runtime)?;
    let r = &outcome.report;
    println!(
        "emitted {} archived {} (mutable {}, immutable {}) dead letters {} failovers {}",
        r.emitted.total,
        r.archived.total,
        r.archived.mutable,
        r.archived.immutable,
        r.dead_letters,
        r.failover_events.len()
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn analyze(input: &Path, legs: &Path, stats: &Path, boxplot: &Path) -> Result<(), Failure> {
    let catalog = LegCatalog::load(legs).map_err(invalid)?;
    let mut records = Vec::new();
    for kind in [StoreKind::Mutable, StoreKind::Immutable] {
        let objects = load_dir(input, kind)
            .with_context(|| format!("reading {}", input.display()))
            .map_err(Failure::Runtime)?;
        for (key, bytes) in objects {
            let env = TelemetryEnvelope::parse_and_validate(&bytes)
                .with_context(|| format!("stored object {key}"))
                .map_err(Failure::Invalid)?;
            let rec = compute_legs(&catalog.legs, &env).map_err(|e| invalid(anyhow::anyhow!("{key}: {e}")))?;
            if !rec.delays.is_empty() {
                records.push(rec);
            }
        }
    }
    if records.is_empty() {
        return Err(invalid(anyhow::anyhow!(
            "no envelope in {} matches a leg definition",
            input.display()
        )));
    }
    for (path, format) in [(stats, ReportFormat::StatsJson), (boxplot, ReportFormat::BoxplotCsv)] {
        let bytes = export_report(&records, format).map_err(invalid)?;
        std::fs::write(path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Runtime)?;
    }
    println!("{} envelopes with leg delays", records.len());
    Ok(())
}

fn drift(scenario: &Path, observed: &Path) -> Result<(), Failure> {
    let desired = load_config(scenario)?.desired_state();
    let text = std::fs::read_to_string(observed)
        .with_context(|| format!("reading {}", observed.display()))
        .map_err(Failure::Invalid)?;
    let observed: ObservedState = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", observed.display()))
        .map_err(Failure::Invalid)?;
    let report = detect_drift(&desired, &observed);
    if report.is_empty() {
        println!("no drift");
        return Ok(());
    }
    for d in &report.items {
        match &d.item {
            Some(item) => println!("{} {item}: desired {} observed {}", d.field, d.desired, d.observed),
            None => println!("{}: desired {} observed {}", d.field, d.desired, d.observed),
        }
    }
    Err(invalid(anyhow::anyhow!("{} drift item(s)", report.len())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            wall_clock,
            inline_analytics,
        } => run(&scenario, &out, seed, wall_clock, inline_analytics),
        Command::Analyze {
            input,
            legs,
            stats,
            boxplot,
        } => analyze(&input, &legs, &stats, &boxplot),
        Command::Drift { scenario, observed } => drift(&scenario, &observed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
