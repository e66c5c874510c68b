use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedgw::config::{ConfigError, ScenarioConfig};
use fedgw::sim::bundle::{write_bundle, MANIFEST};
use fedgw::sim::topology::Layout;
use fedgw::sim::{run, RunOptions, SimError};
use fedgw::sweep::{run_sweep, verify_run, verify_sweep, SweepError, SweepSpec, SWEEP_CSV};

const EXIT_CONFIG: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "fedgw", version, about = "Simulate a federation of residential Wi-Fi gateways")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check a scenario file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one scenario and write its metrics bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, value_enum, default_value = "on")]
        check_invariants: Switch,
    },
    /// Run a parameter sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        check_invariants: Switch,
    },
    /// Recompute summaries of a run or sweep directory from its CSVs.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Violation(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Config(c) => c.into(),
            SweepError::Sim(s) => s.into(),
            SweepError::Io { .. } => Failure::Io(e.to_string()),
        }
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let cfg = ScenarioConfig::load(path)?;
    let layout = Layout::build(&cfg)?;
    println!(
        "{}: ok ({} gateways, {} stations, {} traffic entries, visibility {:.3}, hash {})",
        cfg.name,
        cfg.topology.houses.len(),
        cfg.n_stations(),
        cfg.traffic.len(),
        layout.visibility_fraction(),
        cfg.hash()
    );
    Ok(())
}

fn run_one(path: &Path, out: &Path, seed: Option<u64>, duration: Option<f64>, check: Switch) -> Result<(), Failure> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    cfg.validate()?;
    let opts = RunOptions { check_invariants: check == Switch::On };
    let result = run(&cfg, &opts)?;
    write_bundle(out, &cfg, &result, opts.check_invariants)
        .map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    let s = &result.summary;
    println!(
        "{}: seed {} steady {} on {}/{} heavy {} orphans {} inelastic {:.3} Mbit/s messages {}",
        cfg.name,
        cfg.seed,
        s.steady_state.map_or("none".into(), |t| format!("{t:.2}s")),
        s.gateways_on,
        cfg.topology.houses.len(),
        s.heavy,
        s.orphans,
        s.inelastic_throughput / 1e6,
        s.messages
    );
    if let Some(v) = result.violations.first() {
        return Err(Failure::Violation(v.to_string()));
    }
    Ok(())
}

fn sweep(path: &Path, out: &Path, check: Switch) -> Result<(), Failure> {
    let (spec, base) = SweepSpec::load(path)?;
    let opts = RunOptions { check_invariants: check == Switch::On };
    let result = run_sweep(&spec, &base, out, &opts)?;
    println!("value,stations_per_gateway,runs,steady_runs,off_fraction,mean_ws_per_on");
    for r in &result.summary {
        println!(
            "{},{},{},{},{:.4},{:.3}",
            r.value, r.stations_per_gateway, r.runs, r.steady_runs, r.off_fraction, r.mean_ws_per_on
        );
    }
    let violations: usize = result.rows.iter().map(|r| r.violations).sum();
    if violations > 0 {
        return Err(Failure::Violation(format!("{violations} invariant violations across the sweep")));
    }
    Ok(())
}

fn verify(out: &Path) -> Result<(), Failure> {
    let problems = if out.join(SWEEP_CSV).exists() {
        verify_sweep(out)?
    } else if out.join(MANIFEST).exists() {
        let mut problems = Vec::new();
        verify_run(out, &mut problems)?;
        problems
    } else {
        return Err(Failure::Io(format!("{}: neither {SWEEP_CSV} nor {MANIFEST} found", out.display())));
    };
    if problems.is_empty() {
        println!("{}: consistent", out.display());
        Ok(())
    } else {
        for p in &problems {
            eprintln!("{p}");
        }
        Err(Failure::Config(format!("{} inconsistencies", problems.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { config } => validate(config),
        Command::Run { config, out, seed, duration, check_invariants } => {
            run_one(config, out, *seed, *duration, *check_invariants)
        }
        Command::Sweep { config, out, check_invariants } => sweep(config, out, *check_invariants),
        Command::Verify { out } => verify(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Violation(m)) => {
            eprintln!("invariant violation: {m}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}
