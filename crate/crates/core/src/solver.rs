//! Explicit positivity-preserving time stepping and the Picard fixed-point integrator.

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::kernel::{bounded_params, RateKernel};
use crate::operators::{Model, RhsBreakdown, RhsTables, WeakIntegrand};
use crate::state::{DiagnosticsRecord, StateMeasure, TestFunction, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    /// Two-stage strong-stability-preserving Runge-Kutta.
    Heun,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotPolicy {
    /// Every `k` accepted steps, plus the final time.
    Stride(usize),
    /// At multiples of the interval, plus the final time.
    Interval(f64),
    /// At the listed times (strictly increasing), plus the final time.
    Times(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub t_final: f64,
    pub dt_max: f64,
    /// Fraction of the positivity bound a step may use.
    pub safety: f64,
    pub snapshots: SnapshotPolicy,
    /// Gauss-Legendre nodes per piece in the fragmentation and `B` quadratures.
    pub quad_n: usize,
    /// Accumulate the weak residual of `φ(x) = x` at snapshots.
    pub track_residual: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Heun,
            t_final: 1.0,
            dt_max: 1e-2,
            safety: 0.9,
            snapshots: SnapshotPolicy::Interval(0.1),
            quad_n: 4,
            track_residual: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("final time must be finite and nonnegative, got {}", self.t_final)));
        }
        if !(self.dt_max > 0.0) {
            return Err(Error::Config(format!("dt_max must be positive, got {}", self.dt_max)));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Config(format!("safety factor must lie in (0, 1], got {}", self.safety)));
        }
        match &self.snapshots {
            SnapshotPolicy::Stride(0) => return Err(Error::Config("snapshot stride must be at least 1".into())),
            SnapshotPolicy::Interval(d) if !(*d > 0.0) => {
                return Err(Error::Config(format!("snapshot interval must be positive, got {d}")))
            }
            SnapshotPolicy::Times(ts) => {
                let increasing = ts.windows(2).all(|w| w[0] < w[1]);
                if !increasing || ts.iter().any(|&t| !(t > 0.0 && t <= self.t_final)) {
                    return Err(Error::Config(format!(
                        "snapshot times must increase strictly inside (0, {}], got {ts:?}",
                        self.t_final
                    )));
                }
            }
            _ => {}
        }
        if self.quad_n == 0 {
            return Err(Error::Config("quadrature order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Largest step keeping every entry nonnegative under the rates `r`.
fn positivity_bound(c: &[f64], a: f64, r: &RhsBreakdown) -> (f64, usize) {
    let mut bound = f64::INFINITY;
    let mut cell = usize::MAX;
    for (i, (&ci, &di)) in c.iter().zip(&r.dc).enumerate() {
        if di < 0.0 {
            let b = ci / -di;
            if b < bound {
                bound = b;
                cell = i;
            }
        }
    }
    if r.da < 0.0 {
        let b = a / -r.da;
        if b < bound {
            bound = b;
            cell = c.len();
        }
    }
    (bound, cell)
}

/// One accepted step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: StateMeasure,
    /// Mass that left through merges reaching size 1 during the step.
    pub exited: f64,
}

/// Reusable buffers for stepping on one set of tables.
pub struct Stepper<'a> {
    tables: &'a RhsTables,
    scheme: Scheme,
    safety: f64,
    r0: RhsBreakdown,
    r1: RhsBreakdown,
    stage: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(tables: &'a RhsTables, scheme: Scheme, safety: f64) -> Self {
        let n = tables.grid().len();
        Self { tables, scheme, safety, r0: RhsBreakdown::zeros(n), r1: RhsBreakdown::zeros(n), stage: vec![0.0; n] }
    }

    /// Advances `s` from `t` by `dt`, or reports which cell would go negative.
    pub fn step(&mut self, s: &StateMeasure, t: f64, dt: f64) -> Result<StepOutcome> {
        if dt == 0.0 {
            return Ok(StepOutcome { state: s.clone(), exited: 0.0 });
        }
        let c = s.cells();
        let a = s.atom();
        self.tables.eval_into(c, a, t, &mut self.r0);
        let (bound, cell) = positivity_bound(c, a, &self.r0);
        if dt > self.safety * bound {
            return Err(Error::StepRejected { dt, bound: self.safety * bound, cell });
        }
        for (st, (ci, di)) in self.stage.iter_mut().zip(c.iter().zip(&self.r0.dc)) {
            *st = ci + dt * di;
        }
        let a1 = a + dt * self.r0.da;
        match self.scheme {
            Scheme::Euler => Ok(StepOutcome {
                state: StateMeasure::from_parts(s.grid().clone(), self.stage.clone(), a1),
                exited: dt * self.r0.exited_mass_rate,
            }),
            Scheme::Heun => {
                self.tables.eval_into(&self.stage, a1, t + dt, &mut self.r1);
                let (bound, cell) = positivity_bound(&self.stage, a1, &self.r1);
                if dt > self.safety * bound {
                    return Err(Error::StepRejected { dt, bound: self.safety * bound, cell });
                }
                let cells = c
                    .iter()
                    .zip(&self.stage)
                    .zip(&self.r1.dc)
                    .map(|((ci, si), di)| 0.5 * ci + 0.5 * (si + dt * di))
                    .collect();
                let atom = 0.5 * a + 0.5 * (a1 + dt * self.r1.da);
                Ok(StepOutcome {
                    state: StateMeasure::from_parts(s.grid().clone(), cells, atom),
                    exited: 0.5 * dt * (self.r0.exited_mass_rate + self.r1.exited_mass_rate),
                })
            }
        }
    }
}

/// Single explicit step; see [`Stepper::step`].
pub fn step(s: &StateMeasure, tables: &RhsTables, t: f64, dt: f64, scheme: Scheme, safety: f64) -> Result<StateMeasure> {
    Stepper::new(tables, scheme, safety).step(s, t, dt).map(|o| o.state)
}

struct Recorder<'a> {
    tables: &'a RhsTables,
    alpha: f64,
    residual: Option<WeakIntegrand>,
    phi: TestFunction,
    p0: f64,
    integral: f64,
    prev: Option<(f64, f64)>,
    scratch: RhsBreakdown,
}

impl<'a> Recorder<'a> {
    fn new(tables: &'a RhsTables, initial: &StateMeasure, track_residual: bool) -> Result<Self> {
        let phi = TestFunction::identity();
        let residual = if track_residual { Some(WeakIntegrand::new(tables, &phi)?) } else { None };
        let alpha = tables.model().coag.bounds().map_or(0.0, |b| b.alpha);
        Ok(Self {
            tables,
            alpha,
            residual,
            p0: initial.pair_test(&phi),
            phi,
            integral: 0.0,
            prev: None,
            scratch: RhsBreakdown::zeros(tables.grid().len()),
        })
    }

    fn record(&mut self, t: f64, dt: f64, s: &StateMeasure, exited: f64) -> DiagnosticsRecord {
        self.tables.eval_into(s.cells(), s.atom(), t, &mut self.scratch);
        let residual_phi1 = self.residual.as_ref().map(|w| {
            let cur = w.eval(s, t);
            if let Some((tp, vp)) = self.prev {
                self.integral += 0.5 * (t - tp) * (vp + cur);
            }
            self.prev = Some((t, cur));
            (s.pair_test(&self.phi) - self.p0 - self.integral).abs()
        });
        DiagnosticsRecord {
            t,
            dt,
            m_neg1: s.moment(-1.0),
            m_neg_alpha: s.moment(-self.alpha),
            m0: s.moment(0.0),
            m1: s.moment(1.0),
            m2: s.moment(2.0),
            atom: s.atom(),
            exited_mass: exited,
            entropy: None,
            residual_phi1,
            contributions: self.scratch.totals(),
            d1: None,
            d2: None,
            d3: None,
        }
    }
}

/// Integrates from `t = 0` to `config.t_final`.
///
/// Rejected steps are retried at half the size; a step below `dt_max·2⁻²⁰`
/// aborts with [`Error::Stiffness`].
pub fn run(initial: &StateMeasure, tables: &RhsTables, config: &SolverConfig) -> Result<Trajectory> {
    config.validate()?;
    if !initial.is_valid() {
        return Err(Error::Domain("initial state has negative or non-finite entries".into()));
    }
    if **initial.grid() != **tables.grid() {
        return Err(Error::Config("initial state grid does not match the tables".into()));
    }
    let mut rec = Recorder::new(tables, initial, config.track_residual)?;
    let mut traj = Trajectory::new();
    traj.push(0.0, initial.clone(), rec.record(0.0, 0.0, initial, 0.0))?;
    let t_final = config.t_final;
    if t_final == 0.0 {
        return Ok(traj);
    }
    let dt_min = config.dt_max * 2f64.powi(-20);
    let mut stepper = Stepper::new(tables, config.scheme, config.safety);
    let mut state = initial.clone();
    let mut t = 0.0;
    let mut dt = config.dt_max;
    let mut exited = 0.0;
    let mut accepted = 0usize;
    let mut snap_index = 1usize;
    let next_snapshot = |k: usize| match &config.snapshots {
        SnapshotPolicy::Interval(d) => (k as f64 * d).min(t_final),
        SnapshotPolicy::Times(ts) => ts.get(k - 1).copied().unwrap_or(t_final),
        SnapshotPolicy::Stride(_) => t_final,
    };
    let mut target = next_snapshot(snap_index);
    while t < t_final {
        let mut h = dt.min(target - t);
        // Avoid leaving a sliver before the target.
        if target - t - h < 1e-12 * target.max(1.0) {
            h = target - t;
        }
        match stepper.step(&state, t, h) {
            Ok(out) => {
                let t_new = if (target - (t + h)).abs() <= 1e-12 * target.max(1.0) { target } else { t + h };
                state = out.state;
                exited += out.exited;
                accepted += 1;
                let hit = t_new == target;
                t = t_new;
                let take = match config.snapshots {
                    SnapshotPolicy::Interval(_) | SnapshotPolicy::Times(_) => hit,
                    SnapshotPolicy::Stride(k) => accepted % k == 0 || t == t_final,
                };
                if take {
                    let d = rec.record(t, h, &state, exited);
                    traj.push(t, state.clone(), d)?;
                }
                if hit {
                    snap_index += 1;
                    target = next_snapshot(snap_index);
                }
                if dt < config.dt_max {
                    dt = (2.0 * dt).min(config.dt_max);
                }
            }
            Err(Error::StepRejected { cell, bound, .. }) => {
                dt = 0.5 * h.min(dt);
                debug!("t = {t}: step rejected by cell {cell} (bound {bound:e}), retrying with {dt:e}");
                if dt < dt_min {
                    return Err(Error::Stiffness { t, cell });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

/// Inputs of the contraction estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionInputs {
    pub mu_norm: f64,
    pub k_inf: f64,
    pub k_beta: f64,
    pub m_beta: f64,
    pub m_gamma: f64,
    pub f0: f64,
    pub gamma: f64,
    pub t_final: f64,
}

impl ContractionInputs {
    /// Gathers the constants from a model whose coagulation kernel is bounded.
    pub fn from_model(model: &Model, initial: &StateMeasure, t_final: f64) -> Result<Self> {
        let beta = model.coag.bounds().map_or(0.0, |b| b.beta);
        let kp = bounded_params(&model.coag, beta)?;
        let fb = model
            .frag
            .bounds()
            .ok_or_else(|| Error::Config("fragmentation kernel needs declared F0 and γ".into()))?;
        Ok(Self {
            mu_norm: initial.total_variation(),
            k_inf: kp.k_inf,
            k_beta: kp.k_beta,
            m_beta: model.boundary.moment_bound(beta)?,
            m_gamma: model.boundary.moment_bound(fb.gamma)?,
            f0: fb.f0,
            gamma: fb.gamma,
            t_final,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionParams {
    pub inputs: ContractionInputs,
    /// Radius of the invariant ball.
    pub r: f64,
    /// Contraction horizon.
    pub tau: f64,
}

impl ContractionParams {
    /// `(6K∞ + KβM̄β + 3F0) τ`, the Lipschitz constant of the Picard map.
    pub fn lipschitz_factor(&self) -> f64 {
        let i = &self.inputs;
        (6.0 * i.k_inf + i.k_beta * i.m_beta + 3.0 * i.f0) * self.tau
    }
}

pub fn contraction_params(inputs: ContractionInputs) -> Result<ContractionParams> {
    let ContractionInputs { mu_norm, k_inf, k_beta, m_beta, m_gamma, f0, gamma, t_final } = inputs;
    if !k_inf.is_finite() || !k_beta.is_finite() {
        return Err(Error::Unbounded("contraction constants need a bounded kernel".into()));
    }
    let r = mu_norm + f0 / (1.0 + gamma) * (mu_norm + 2.0 * f0 * m_gamma * t_final) * t_final + 2.0 * f0 * m_gamma;
    let lip = 6.0 * k_inf + k_beta * m_beta + 3.0 * f0;
    let second = if lip > 0.0 { 1.0 / lip } else { f64::INFINITY };
    let first = if r > 0.0 {
        let growth = 6.0 * k_inf * r * r + 2.0 * (k_beta * m_beta + 3.0 * f0) * r + 2.0 * f0 * m_gamma;
        if growth > 0.0 {
            r / growth
        } else {
            f64::INFINITY
        }
    } else {
        f64::INFINITY
    };
    let tau = 0.99 * first.min(second);
    Ok(ContractionParams { inputs, r, tau })
}

#[derive(Clone, Debug)]
pub struct PicardResult {
    pub trajectory: Trajectory,
    /// `sup_t ‖μ⁽ᵏ⁺¹⁾_t − μ⁽ᵏ⁾_t‖_TV` for each iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl PicardResult {
    /// Ratios of successive distances.
    pub fn ratios(&self) -> Vec<f64> {
        self.history.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect()
    }
}

/// Fixed-point iteration `μ ↦ μ_in + ∫_0^t rhs(μ_s) ds` on `n_steps` uniform
/// intervals of `[0, τ]`, trapezoid in time.
pub fn picard_run(
    initial: &StateMeasure,
    tables: &RhsTables,
    params: &ContractionParams,
    tau: f64,
    n_iter: usize,
    n_steps: usize,
) -> Result<PicardResult> {
    if !(tau > 0.0) || n_steps == 0 {
        return Err(Error::Config("Picard horizon and step count must be positive".into()));
    }
    if tau > params.tau {
        warn!("requested horizon {tau} exceeds the contraction horizon {}", params.tau);
        return Err(Error::Picard(format!("τ = {tau} exceeds the contraction horizon {}", params.tau)));
    }
    let n = tables.grid().len();
    let h = tau / n_steps as f64;
    let times: Vec<f64> = (0..=n_steps).map(|k| if k == n_steps { tau } else { k as f64 * h }).collect();
    let c0 = initial.cells().to_vec();
    let a0 = initial.atom();
    let mut cells: Vec<Vec<f64>> = vec![c0.clone(); n_steps + 1];
    let mut atoms = vec![a0; n_steps + 1];
    let mut history = Vec::new();
    let mut converged = false;
    let mut r = RhsBreakdown::zeros(n);
    let mut rates: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; n], 0.0); n_steps + 1];
    for _ in 0..n_iter {
        for k in 0..=n_steps {
            tables.eval_into(&cells[k], atoms[k], times[k], &mut r);
            rates[k].0.copy_from_slice(&r.dc);
            rates[k].1 = r.da;
        }
        let mut next_c = c0.clone();
        let mut next_a = a0;
        let mut dist: f64 = 0.0;
        let mut new_cells = Vec::with_capacity(n_steps + 1);
        let mut new_atoms = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            if k > 0 {
                let dtk = times[k] - times[k - 1];
                for i in 0..n {
                    next_c[i] += 0.5 * dtk * (rates[k - 1].0[i] + rates[k].0[i]);
                }
                next_a += 0.5 * dtk * (rates[k - 1].1 + rates[k].1);
            }
            let d: f64 = next_c.iter().zip(&cells[k]).map(|(a, b)| (a - b).abs()).sum::<f64>() + (next_a - atoms[k]).abs();
            dist = dist.max(d);
            new_cells.push(next_c.clone());
            new_atoms.push(next_a);
        }
        cells = new_cells;
        atoms = new_atoms;
        history.push(dist);
        if let Some(v) = cells.iter().flatten().chain(atoms.iter()).find(|&&v| v < -1e-8) {
            return Err(Error::Picard(format!("iterate took the negative value {v:e}")));
        }
        if dist < 1e-10 {
            converged = true;
            break;
        }
    }
    let mut trajectory = Trajectory::new();
    let alpha = tables.model().coag.bounds().map_or(0.0, |b| b.alpha);
    for (k, (c, a)) in cells.into_iter().zip(atoms).enumerate() {
        let s = StateMeasure::from_parts(tables.grid().clone(), c, a);
        let d = DiagnosticsRecord {
            t: times[k],
            dt: if k == 0 { 0.0 } else { h },
            m_neg1: s.moment(-1.0),
            m_neg_alpha: s.moment(-alpha),
            m0: s.moment(0.0),
            m1: s.moment(1.0),
            m2: s.moment(2.0),
            atom: s.atom(),
            ..Default::default()
        };
        trajectory.push(times[k], s, d)?;
    }
    Ok(PicardResult { trajectory, history, converged })
}

/// `sup_{(0,1]²} K`, used only as a step-size hint.
pub fn coag_scale(model: &Model) -> f64 {
    let x = [1e-3, 0.1, 0.5, 1.0];
    let mut m: f64 = 0.0;
    for &a in &x {
        for &b in &x {
            m = m.max(model.coag.rate(a, b));
        }
    }
    m
}
