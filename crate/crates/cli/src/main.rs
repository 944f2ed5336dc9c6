//! `coagfrag`: scenario-driven runs, equilibria, oracle comparisons and kernel checks.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad configuration, 3 runtime failure.

mod commands;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "coagfrag", version, about = "Coagulation-fragmentation with a large-cluster reservoir")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Run,
    Equilibrium,
    CompareOracle,
    ValidateKernel,
    DecayFit,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate a scenario and write diagnostics, snapshots and a manifest.
    Run(Common),
    /// Detailed-balance profile at the grid pivots plus the probe spread.
    Equilibrium(Common),
    /// Compare moments against the discrete reference system (lattice grids only).
    CompareOracle(Common),
    /// Sample the kernels against their declared bound constants.
    ValidateKernel(Common),
    /// Integrate and fit the decay rate of a moment.
    DecayFit(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Scenario file (TOML). Several may be given with --batch.
    #[arg(long, required = true, num_args = 1..)]
    scenario: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the snapshot schedule with K evenly spaced snapshots.
    #[arg(long, value_name = "K")]
    snapshots: Option<usize>,
    /// Run each scenario in a separate worker process, writing to OUT/<file stem>.
    #[arg(long)]
    batch: bool,
    /// Number of batch workers.
    #[arg(long, env = "COAGFRAG_WORKERS")]
    workers: Option<usize>,
}

impl Command {
    fn split(&self) -> (Kind, &Common) {
        match self {
            Command::Run(c) => (Kind::Run, c),
            Command::Equilibrium(c) => (Kind::Equilibrium, c),
            Command::CompareOracle(c) => (Kind::CompareOracle, c),
            Command::ValidateKernel(c) => (Kind::ValidateKernel, c),
            Command::DecayFit(c) => (Kind::DecayFit, c),
        }
    }
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Run => "run",
            Kind::Equilibrium => "equilibrium",
            Kind::CompareOracle => "compare-oracle",
            Kind::ValidateKernel => "validate-kernel",
            Kind::DecayFit => "decay-fit",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = cli.command.split();
    let code = if common.batch {
        batch(kind, common)
    } else if common.scenario.len() != 1 {
        eprintln!("error: several scenarios need --batch");
        2
    } else {
        match single(kind, common) {
            Ok(()) => 0,
            Err(f) => {
                eprintln!("error: {f}");
                f.code()
            }
        }
    };
    ExitCode::from(code)
}

fn single(kind: Kind, c: &Common) -> Result<(), Failure> {
    let path = &c.scenario[0];
    let mut sc = coagfrag::scenario::Scenario::from_path(path).map_err(Failure::from)?;
    if let Some(seed) = c.seed {
        sc.seed = seed;
    }
    if let Some(k) = c.snapshots {
        if k == 0 {
            return Err(Failure::Config("--snapshots must be at least 1".into()));
        }
        sc.solver.snapshot_interval = sc.solver.t_final / k as f64;
        sc.solver.snapshot_stride = None;
        sc.solver.snapshot_times = None;
    }
    let ctx = commands::Context { scenario: sc, out: c.out.clone(), command: kind.name().to_string() };
    match kind {
        Kind::Run => commands::run(&ctx),
        Kind::Equilibrium => commands::equilibrium(&ctx),
        Kind::CompareOracle => commands::compare_oracle(&ctx),
        Kind::ValidateKernel => commands::validate_kernel(&ctx),
        Kind::DecayFit => commands::decay_fit(&ctx),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

/// Fans scenarios out to child processes; returns the worst exit code.
fn batch(kind: Kind, c: &Common) -> u8 {
    let stems: BTreeSet<String> = c.scenario.iter().map(|p| stem(p)).collect();
    if stems.len() != c.scenario.len() {
        eprintln!("error: batch scenarios must have distinct file names");
        return 2;
    }
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: cannot locate executable: {e}");
            return 3;
        }
    };
    let workers = c
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, c.scenario.len());
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![0u8; c.scenario.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = c.scenario.get(i) else { break };
                let mut cmd = std::process::Command::new(&exe);
                cmd.arg(kind.name()).arg("--scenario").arg(path).arg("--out").arg(c.out.join(stem(path)));
                if let Some(seed) = c.seed {
                    cmd.arg("--seed").arg(seed.to_string());
                }
                if let Some(k) = c.snapshots {
                    cmd.arg("--snapshots").arg(k.to_string());
                }
                let code = match cmd.status() {
                    Ok(st) => st.code().map_or(3, |c| c.clamp(0, 255) as u8),
                    Err(e) => {
                        error!("{}: cannot start worker: {e}", path.display());
                        3
                    }
                };
                info!("{}: exit {code}", path.display());
                codes.lock().unwrap()[i] = code;
            });
        }
    });
    let codes = codes.into_inner().unwrap();
    for (p, code) in c.scenario.iter().zip(&codes) {
        println!("{}\t{}", code, p.display());
    }
    codes.into_iter().max().unwrap_or(0)
}
