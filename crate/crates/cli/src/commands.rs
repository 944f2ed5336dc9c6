use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use coagfrag::analysis::{annotate_entropy, fit_decay, l1_distance, DecayFit};
use coagfrag::io::{self, Manifest};
use coagfrag::kernel::{validate_coag_bounds, validate_frag_bounds, BoundReport};
use coagfrag::operators::{weak_residual_series, RhsTables};
use coagfrag::oracle::{integrate_discrete, DiscreteSystem};
use coagfrag::scenario::Scenario;
use coagfrag::solver::{self, SnapshotPolicy};
use coagfrag::state::{TestFunction, Trajectory};
use coagfrag::Error;
use log::{info, warn};
use serde_json::{json, Value};

/// Bound violations below this are rounding.
const VIOLATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Runtime(m) => write!(f, "runtime: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub struct Context {
    pub scenario: Scenario,
    pub out: PathBuf,
    pub command: String,
}

/// Collects output files in memory so nothing is written unless the command gets that far.
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add<F>(&mut self, name: impl Into<String>, fill: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut Vec<u8>) -> coagfrag::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    fn flush(mut self, ctx: &Context, summary: Value) -> Result<(), Failure> {
        let mut names: Vec<String> = self.files.iter().map(|(n, _)| n.clone()).collect();
        names.push("manifest.json".into());
        names.sort();
        let manifest = Manifest {
            tool: "coagfrag".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: ctx.command.clone(),
            seed: ctx.scenario.seed,
            scenario: &ctx.scenario,
            outputs: names,
            summary,
        };
        let mut buf = Vec::new();
        io::write_manifest(&mut buf, &manifest)?;
        buf.push(b'\n');
        self.files.push(("manifest.json".into(), buf));
        for (name, bytes) in &self.files {
            write_bytes(&ctx.out.join(name), bytes)?;
        }
        info!("wrote {} files to {}", self.files.len(), ctx.out.display());
        Ok(())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io_err = |e: std::io::Error| Failure::Config(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn fit_json(f: &DecayFit) -> Value {
    json!({ "rate": f.rate, "intercept": f.intercept, "r_squared": f.r_squared, "points": f.points })
}

fn report_json(r: &BoundReport) -> Value {
    json!({
        "samples": r.samples,
        "max_violation": r.max_violation,
        "worst_point": [r.worst_point.0, r.worst_point.1],
        "lower_violation": r.lower_violation,
        "lower_worst_point": r.lower_worst_point.map(|p| [p.0, p.1]),
    })
}

fn write_residuals(out: &mut Vec<u8>, traj: &Trajectory, series: &[Vec<f64>]) -> coagfrag::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..series.len()).map(|k| format!("phi{k:02}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, t) in traj.times.iter().enumerate() {
        let mut row = vec![format!("{t:?}")];
        row.extend(series.iter().map(|s| format!("{:?}", s[i])));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn integrate(ctx: &Context) -> Result<(coagfrag::scenario::Built, RhsTables, Trajectory), Failure> {
    let built = ctx.scenario.build()?;
    let tables = RhsTables::new(&built.model, built.grid.clone(), built.solver.quad_n)?;
    let traj = solver::run(&built.initial, &tables, &built.solver)?;
    Ok((built, tables, traj))
}

fn decay(ctx: &Context, traj: &Trajectory) -> Result<Option<DecayFit>, Failure> {
    match &ctx.scenario.analysis.decay_fit {
        Some(f) => Ok(Some(fit_decay(traj, f.moment, (f.window[0], f.window[1]), f.mode.into())?)),
        None => Ok(None),
    }
}

pub fn run(ctx: &Context) -> Result<(), Failure> {
    let sc = &ctx.scenario;
    let (built, tables, mut traj) = integrate(ctx)?;
    let mut summary = serde_json::Map::new();
    let first = traj.diagnostics[0].clone();
    let last = traj.diagnostics.last().expect("initial snapshot").clone();
    summary.insert("snapshots".into(), json!(traj.len()));
    summary.insert("t_final".into(), json!(last.t));
    summary.insert("m0".into(), json!([first.m0, last.m0]));
    summary.insert("m1".into(), json!([first.m1, last.m1]));
    summary.insert("exited_mass".into(), json!(last.exited_mass));

    let mut out = Outputs::new();
    if let Some(eq) = &built.equilibrium {
        let recs = annotate_entropy(&mut traj, &tables, &eq.values)?;
        let rise = recs.windows(2).map(|w| w[1].h - w[0].h).fold(f64::NEG_INFINITY, f64::max);
        summary.insert("entropy".into(), json!([recs[0].h, recs[recs.len() - 1].h]));
        summary.insert("entropy_max_rise".into(), json!(if rise.is_finite() { rise } else { 0.0 }));
        let (_, s) = traj.last().expect("initial snapshot");
        summary.insert("l1_to_equilibrium".into(), json!(l1_distance(s, &eq.values)?));
        summary.insert("equilibrium_spread".into(), json!(eq.spread));
        out.add("equilibrium.csv", |w| io::write_equilibrium_csv(w, &built.grid, eq))?;
    }
    if sc.analysis.residual_battery {
        let series = TestFunction::battery()
            .iter()
            .map(|phi| weak_residual_series(&traj, &tables, phi))
            .collect::<coagfrag::Result<Vec<_>>>()?;
        let worst = series.iter().flatten().fold(0.0f64, |m, r| m.max(r.abs()));
        summary.insert("max_weak_residual".into(), json!(worst));
        out.add("residuals.csv", |w| write_residuals(w, &traj, &series))?;
    }
    if let Some(fit) = decay(ctx, &traj)? {
        summary.insert("decay_fit".into(), fit_json(&fit));
    }
    out.add("diagnostics.csv", |w| io::write_diagnostics_csv(w, &traj.diagnostics))?;
    for (k, s) in traj.states.iter().enumerate() {
        out.add(format!("snapshots/state_{k:05}.csv"), |w| io::write_state_csv(w, s))?;
    }
    println!(
        "{}: {} snapshots to t = {}, m0 {:.6e} -> {:.6e}",
        sc.name,
        traj.len(),
        last.t,
        first.m0,
        last.m0
    );
    out.flush(ctx, Value::Object(summary))
}

pub fn equilibrium(ctx: &Context) -> Result<(), Failure> {
    let sc = &ctx.scenario;
    let model = sc.build_model()?;
    let grid = sc.build_grid()?;
    let eq = sc.equilibrium(&model, &grid)?;
    let tol = sc.analysis.spread_tolerance;
    let balanced = eq.spread <= tol;
    let warning = (!balanced).then(|| {
        format!("probe spread {:.3e} exceeds {tol:.1e}: the scenario is not in detailed balance", eq.spread)
    });
    let report = json!({
        "spread": eq.spread,
        "tolerance": tol,
        "detailed_balance": balanced,
        "warning": warning,
        "probes": sc.analysis.probes,
    });
    let mut out = Outputs::new();
    out.add("equilibrium.csv", |w| io::write_equilibrium_csv(w, &grid, &eq))?;
    out.add("equilibrium.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    println!("{}: spread {:.3e} over {} pivots", sc.name, eq.spread, eq.pivots.len());
    if let Some(w) = &warning {
        warn!("{w}");
        println!("WARNING: {w}");
    }
    out.flush(ctx, report)
}

fn rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

pub fn compare_oracle(ctx: &Context) -> Result<(), Failure> {
    let sc = &ctx.scenario;
    let model = sc.build_model()?;
    let grid = sc.build_grid()?;
    if !grid.is_lattice() {
        return Err(Failure::Config("compare-oracle needs a lattice grid".into()));
    }
    if !model.boundary.modulation().is_constant() {
        return Err(Failure::Config("compare-oracle needs a time-independent boundary datum".into()));
    }
    if sc.solver.atom_sink {
        return Err(Failure::Config("compare-oracle has no counterpart for the atom sink".into()));
    }
    let initial = sc.build_initial(grid.clone())?;
    if initial.atom() != 0.0 {
        return Err(Failure::Config("compare-oracle needs an empty atom".into()));
    }
    let mut checkpoints: Vec<f64> = sc.oracle.checkpoints.iter().copied().filter(|&t| t > 0.0).collect();
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup();
    let t_final = checkpoints.last().copied().unwrap_or(0.0);
    let mut cfg = sc.solver_config()?;
    cfg.t_final = t_final;
    cfg.snapshots = if checkpoints.is_empty() { SnapshotPolicy::Stride(1) } else { SnapshotPolicy::Times(checkpoints.clone()) };
    cfg.track_residual = false;
    let tables = RhsTables::new(&model, grid.clone(), cfg.quad_n)?;
    let traj = solver::run(&initial, &tables, &cfg)?;
    let sys = DiscreteSystem::from_model(&model, grid.len())?;
    let reference = integrate_discrete(&sys, initial.cells(), t_final, sc.oracle.dt)?;

    let mut csv = String::from("t,m0_solver,m0_oracle,m0_rel_err,m1_solver,m1_oracle,m1_rel_err\n");
    let mut worst: f64 = 0.0;
    println!("{:>8} {:>12} {:>12}", "t", "m0 rel err", "m1 rel err");
    for t in std::iter::once(0.0).chain(checkpoints.iter().copied()) {
        let s = &traj.states[traj.index_of(t).ok_or_else(|| Failure::Runtime(format!("no snapshot at t = {t}")))?];
        let c = reference.state_at(t).ok_or_else(|| Failure::Runtime(format!("no oracle state at t = {t}")))?;
        let (a0, b0) = (s.interior_moment(0.0), sys.moment(&c, 0.0));
        let (a1, b1) = (s.interior_moment(1.0), sys.moment(&c, 1.0));
        let (e0, e1) = (rel_err(a0, b0), rel_err(a1, b1));
        worst = worst.max(e0).max(e1);
        csv.push_str(&format!("{t:?},{a0:?},{b0:?},{e0:?},{a1:?},{b1:?},{e1:?}\n"));
        println!("{t:>8} {e0:>12.3e} {e1:>12.3e}");
    }
    let tol = sc.oracle.tolerance;
    let pass = worst < tol;
    println!("{} {}: max relative error {worst:.3e} (tolerance {tol:.1e})", if pass { "PASS" } else { "FAIL" }, sc.name);
    let mut out = Outputs::new();
    out.add("compare_oracle.csv", |w| Ok(w.extend_from_slice(csv.as_bytes())))?;
    out.flush(ctx, json!({ "max_rel_err": worst, "tolerance": tol, "pass": pass }))?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative moment error {worst:.3e} is not below {tol:.1e}")))
    }
}

pub fn validate_kernel(ctx: &Context) -> Result<(), Failure> {
    let sc = &ctx.scenario;
    let k = sc.coag_kernel()?;
    let f = sc.frag_kernel(&k)?;
    let n = sc.analysis.bound_samples;
    let coag = validate_coag_bounds(&k, n, sc.seed)?;
    let frag = if f.is_zero() { None } else { Some(validate_frag_bounds(&f, n, sc.seed)?) };
    let worst = [Some(coag.max_violation), coag.lower_violation, frag.map(|r| r.max_violation)]
        .into_iter()
        .flatten()
        .fold(0.0f64, f64::max);
    let pass = worst <= VIOLATION_TOLERANCE;
    println!("coagulation: upper {:.3e}, lower {:?} over {} samples", coag.max_violation, coag.lower_violation, coag.samples);
    if let Some(r) = &frag {
        println!("fragmentation: upper {:.3e} over {} samples", r.max_violation, r.samples);
    }
    println!("{} {}", if pass { "PASS" } else { "FAIL" }, sc.name);
    let report = json!({
        "coagulation": report_json(&coag),
        "fragmentation": frag.as_ref().map(report_json),
        "pass": pass,
    });
    let mut out = Outputs::new();
    out.add("kernel_bounds.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    out.flush(ctx, report)?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("declared bounds violated by a relative {worst:.3e}")))
    }
}

pub fn decay_fit(ctx: &Context) -> Result<(), Failure> {
    let sc = &ctx.scenario;
    let Some(spec) = &sc.analysis.decay_fit else {
        return Err(Failure::Config("scenario has no [analysis.decay_fit] section".into()));
    };
    let (_, _, traj) = integrate(ctx)?;
    let fit = decay(ctx, &traj)?.expect("decay fit requested");
    println!(
        "{}: m_{} decays at rate {:.6} (R² {:.6}, {} points in [{}, {}])",
        sc.name, spec.moment, fit.rate, fit.r_squared, fit.points, spec.window[0], spec.window[1]
    );
    let report = fit_json(&fit);
    let mut out = Outputs::new();
    out.add("decay_fit.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    out.add("diagnostics.csv", |w| io::write_diagnostics_csv(w, &traj.diagnostics))?;
    out.flush(ctx, report)
}
