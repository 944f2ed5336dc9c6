//! Equilibria, entropy and dissipation, decay fits and moment ledgers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::BoundaryDatum;
use crate::error::{Error, Result};
use crate::kernel::RateKernel;
use crate::operators::RhsTables;
use crate::profile::Profile;
use crate::quadrature::GaussLegendre;
use crate::state::{Grid, StateMeasure, TestFunction, Trajectory};

pub const DEFAULT_PROBES: [f64; 5] = [1.25, 1.5, 2.0, 3.0, 5.0];
pub const SPREAD_TOLERANCE: f64 = 1e-6;

/// `D(a, b) = (a − b)(log a − log b)`, infinite when exactly one side vanishes.
pub fn d_log(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if a <= 0.0 || b <= 0.0 {
        return f64::INFINITY;
    }
    (a - b) * (a.ln() - b.ln())
}

/// Entropy integrand `u (log(u/q) − 1) + q`, with `0 log 0 = 0`.
pub fn entropy_density(u: f64, q: f64) -> f64 {
    if u == 0.0 {
        q
    } else {
        u * ((u / q).ln() - 1.0) + q
    }
}

/// Value and probe spread of `F(x,y)/K(x,y) · g(x+y)/g(y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FInfinity {
    pub value: f64,
    pub spread: f64,
}

pub fn f_infinity<K, F>(k: &K, f: &F, g: &BoundaryDatum, x: f64, probes: &[f64]) -> Result<FInfinity>
where
    K: RateKernel + ?Sized,
    F: RateKernel + ?Sized,
{
    if probes.is_empty() {
        return Err(Error::Config("f_infinity needs at least one probe".into()));
    }
    let mut ratios = Vec::with_capacity(probes.len());
    for &y in probes {
        if !(y > 1.0) {
            return Err(Error::Config(format!("probe points must exceed 1, got {y}")));
        }
        let denom = k.rate(x, y) * g.eval(0.0, y);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::InvalidScenario(format!("K(x,y) g(y) vanishes at x = {x}, y = {y}")));
        }
        ratios.push(f.rate(x, y) * g.eval(0.0, x + y) / denom);
    }
    let value = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let spread = if value == 0.0 {
        0.0
    } else {
        ratios.iter().map(|r| ((r - value) / value).abs()).fold(0.0, f64::max)
    };
    Ok(FInfinity { value, spread })
}

/// `f∞` at the pivots of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumProfile {
    pub pivots: Vec<f64>,
    pub values: Vec<f64>,
    /// Worst probe spread over all pivots.
    pub spread: f64,
}

impl EquilibriumProfile {
    pub fn is_detailed_balance(&self) -> bool {
        self.spread <= SPREAD_TOLERANCE
    }

    /// The profile as a cell state (density times width).
    pub fn to_state(&self, grid: std::sync::Arc<Grid>) -> Result<StateMeasure> {
        let cells = self.values.iter().zip(grid.widths()).map(|(v, w)| v * w).collect();
        StateMeasure::new(grid, cells, 0.0)
    }
}

pub fn equilibrium_profile<K, F>(k: &K, f: &F, g: &BoundaryDatum, grid: &Grid, probes: &[f64]) -> Result<EquilibriumProfile>
where
    K: RateKernel + ?Sized,
    F: RateKernel + ?Sized,
{
    let mut values = Vec::with_capacity(grid.len());
    let mut spread: f64 = 0.0;
    for &x in grid.pivots() {
        let r = f_infinity(k, f, g, x, probes)?;
        values.push(r.value);
        spread = spread.max(r.spread);
    }
    Ok(EquilibriumProfile { pivots: grid.pivots().to_vec(), values, spread })
}

/// Largest relative residual `|K Q(x)Q(y) − F Q(x+y)| / K Q(x)Q(y)` over seeded samples.
pub fn check_detailed_balance<K, F>(k: &K, f: &F, q: &Profile, samples: usize, seed: u64) -> f64
where
    K: RateKernel + ?Sized,
    F: RateKernel + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let (x, y) = if i % 2 == 0 {
            (rng.random_range(1e-3..2.0), rng.random_range(1e-3..2.0))
        } else {
            (10f64.powf(rng.random_range(-4.0..0.5)), 10f64.powf(rng.random_range(-4.0..0.5)))
        };
        let lhs = k.rate(x, y) * q.eval(x) * q.eval(y);
        let rhs = f.rate(x, y) * q.eval(x + y);
        let diff = (lhs - rhs).abs();
        let r = if lhs != 0.0 { diff / lhs.abs() } else { diff };
        worst = worst.max(r);
    }
    worst
}

fn check_profile(q: &[f64], n: usize) -> Result<()> {
    if q.len() != n {
        return Err(Error::Config(format!("profile has {} values for {} cells", q.len(), n)));
    }
    if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::SingularProfile(format!("Q must be positive at every pivot, got {v} in cell {i}")));
    }
    Ok(())
}

/// `H = Σ Δx_i (f_i [log(f_i/Q_i) − 1] + Q_i)` for `Q` given at the pivots.
pub fn entropy(s: &StateMeasure, q: &[f64]) -> Result<f64> {
    let grid = s.grid();
    check_profile(q, grid.len())?;
    Ok(s.densities().iter().zip(q).zip(grid.widths()).map(|((&f, &qi), &w)| w * entropy_density(f, qi)).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EntropyRecord {
    pub t: f64,
    pub h: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// `D₂` without the factor one half on the ordered-pair sum.
    pub d2_unhalved: f64,
}

impl EntropyRecord {
    pub fn total(&self) -> f64 {
        self.d1 + self.d2 + self.d3
    }
}

/// Entropy and the three dissipation integrals at time `t`.
pub fn dissipation(s: &StateMeasure, tables: &RhsTables, q: &[f64], t: f64) -> Result<EntropyRecord> {
    let grid = s.grid();
    if **grid != **tables.grid() {
        return Err(Error::Config("state grid does not match the tables".into()));
    }
    let h = entropy(s, q)?;
    let model = tables.model();
    let f = s.densities();
    let x = grid.pivots();
    let w = grid.widths();
    let n = grid.len();
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = x[i] + x[j];
            let wij = w[i] * w[j];
            let k = model.coag.rate(x[i], x[j]);
            if v < 1.0 {
                let fm = grid.cell_of(v).map_or(0.0, |c| f[c]);
                let fr = model.frag.rate(x[i], x[j]);
                d1 += 0.5 * wij * d_log(k * f[i] * f[j], fr * fm);
            } else if v > 1.0 && v < 2.0 && k > 0.0 {
                d2 += 0.5 * wij * k * d_log(f[i] * f[j], q[i] * q[j]);
            }
        }
    }
    let gtab = tables.boundary().at(t);
    let d3 = (0..n).map(|i| w[i] * gtab.g[i] * d_log(f[i], q[i])).sum();
    Ok(EntropyRecord { t, h, d1, d2, d3, d2_unhalved: 2.0 * d2 })
}

/// Entropy records for every snapshot; also stored in the trajectory diagnostics.
pub fn annotate_entropy(traj: &mut Trajectory, tables: &RhsTables, q: &[f64]) -> Result<Vec<EntropyRecord>> {
    let mut out = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let r = dissipation(&traj.states[k], tables, q, traj.times[k])?;
        let d = &mut traj.diagnostics[k];
        d.entropy = Some(r.h);
        d.d1 = Some(r.d1);
        d.d2 = Some(r.d2);
        d.d3 = Some(r.d3);
        out.push(r);
    }
    Ok(out)
}

/// One row of the integrated entropy inequality `H(t) + ∫₀ᵗ D ds ≤ H(0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyBalance {
    pub t: f64,
    pub h: f64,
    pub dissipated: f64,
    /// Same integral with the unhalved `D₂`.
    pub dissipated_unhalved: f64,
}

impl EntropyBalance {
    /// `H(t) + ∫D − H(0)`; nonpositive when the inequality holds.
    pub fn excess(&self, h0: f64) -> f64 {
        self.h + self.dissipated - h0
    }
}

pub fn entropy_balance(records: &[EntropyRecord]) -> Vec<EntropyBalance> {
    let mut acc = 0.0;
    let mut acc_u = 0.0;
    let mut out = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        if k > 0 {
            let p = &records[k - 1];
            let dt = r.t - p.t;
            acc += 0.5 * dt * (p.total() + r.total());
            acc_u += 0.5 * dt * (p.d1 + p.d2_unhalved + p.d3 + r.d1 + r.d2_unhalved + r.d3);
        }
        out.push(EntropyBalance { t: r.t, h: r.h, dissipated: acc, dissipated_unhalved: acc_u });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Slope of `−log m` against `t`.
    Exponential,
    /// Slope of `−log m` against `log t`.
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of `−log m` on the window `[t1, t2]`.
pub fn fit_series(times: &[f64], values: &[f64], window: (f64, f64), mode: DecayMode) -> Result<DecayFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &m) in times.iter().zip(values) {
        if t < window.0 || t > window.1 {
            continue;
        }
        if !(m > 0.0) {
            return Err(Error::Fit(format!("nonpositive value {m} at t = {t}")));
        }
        let x = match mode {
            DecayMode::Exponential => t,
            DecayMode::Power => {
                if t <= 0.0 {
                    return Err(Error::Fit("power-law fit needs t > 0".into()));
                }
                t.ln()
            }
        };
        xs.push(x);
        ys.push(-m.ln());
    }
    let n = xs.len();
    if n < 10 {
        return Err(Error::Fit(format!("only {n} points in the window, need at least 10")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let rate = sxy / sxx;
    let intercept = my - rate * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(DecayFit { rate, intercept, r_squared, points: n })
}

/// Fit of the moment of order `lambda` (atom included) along a trajectory.
pub fn fit_decay(traj: &Trajectory, lambda: f64, window: (f64, f64), mode: DecayMode) -> Result<DecayFit> {
    let values: Vec<f64> = traj.states.iter().map(|s| s.moment(lambda)).collect();
    fit_series(&traj.times, &values, window, mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerEntry {
    pub t: f64,
    pub m0: f64,
    /// `K₁ ∫₀ᵗ m₋α M_β ds`.
    pub integral: f64,
    pub bound: f64,
    pub ok: bool,
}

impl LedgerEntry {
    pub fn lhs(&self) -> f64 {
        self.m0 + self.integral
    }
}

/// Ledger `m₀(t) + K₁ ∫₀ᵗ m₋α M_β ds ≤ m₀(0)(1 + tol)` along a trajectory.
pub fn negative_moment_check(
    traj: &Trajectory,
    k1: f64,
    alpha: f64,
    beta: f64,
    boundary: &BoundaryDatum,
    tol: f64,
) -> Result<Vec<LedgerEntry>> {
    let Some(first) = traj.states.first() else {
        return Ok(Vec::new());
    };
    let bound = first.moment(0.0) * (1.0 + tol);
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut out = Vec::with_capacity(traj.len());
    for (&t, s) in traj.times.iter().zip(&traj.states) {
        let integrand = if boundary.is_zero() { 0.0 } else { s.moment(-alpha) * boundary.moment(beta, t)? };
        if let Some((tp, vp)) = prev {
            acc += 0.5 * (t - tp) * (vp + integrand);
        }
        prev = Some((t, integrand));
        let m0 = s.moment(0.0);
        let integral = k1 * acc;
        out.push(LedgerEntry { t, m0, integral, bound, ok: m0 + integral <= bound });
    }
    Ok(out)
}

/// `Σ Δx_i |f_i − Q_i|`, a grid proxy for the L¹ distance.
pub fn l1_distance(s: &StateMeasure, q: &[f64]) -> Result<f64> {
    if q.len() != s.grid().len() {
        return Err(Error::Config("profile length does not match the grid".into()));
    }
    Ok(s.densities().iter().zip(q).zip(s.grid().widths()).map(|((f, q), w)| w * (f - q).abs()).sum())
}

/// `Σ c_i φ(x_i) − ∫₀¹ Q φ dx` for each test function; the atom is left out.
pub fn weak_differences(s: &StateMeasure, q: &Profile, battery: &[TestFunction]) -> Vec<f64> {
    let gl = GaussLegendre::new(8);
    battery
        .iter()
        .map(|phi| {
            let mut exact = 0.0;
            let mut a = 0.0;
            for &b in phi.breaks() {
                if b > a {
                    exact += gl.integrate(|x| q.eval(x) * phi.eval(x), a, b);
                }
                a = b;
            }
            let interior: f64 = s.cells().iter().zip(s.grid().pivots()).map(|(c, &x)| c * phi.eval(x)).sum();
            interior - exact
        })
        .collect()
}

/// `(m₀(0) + 2 F₀ M̄_γ t) e^{F₀ t}`.
pub fn gronwall_bound(m0_initial: f64, f0: f64, m_gamma: f64, t: f64) -> f64 {
    (m0_initial + 2.0 * f0 * m_gamma * t) * (f0 * t).exp()
}

/// Small-size mass bound `μ_in(0,δ) + δ(F₀(4+γ)/(1+γ) t S + 2F₀M_γ t)`.
pub fn tightness_bound(initial_prefix: f64, delta: f64, f0: f64, gamma: f64, m_gamma: f64, sup_count: f64, t: f64) -> f64 {
    initial_prefix + delta * (f0 * (4.0 + gamma) / (1.0 + gamma) * t * sup_count + 2.0 * f0 * m_gamma * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CoagKernel, FragKernel};
    use crate::operators::Model;
    use crate::profile::PowerExp;
    use crate::state::GridKind;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn e1() -> f64 {
        (-1.0f64).exp()
    }

    #[test]
    fn f_infinity_examples() {
        let g = BoundaryDatum::exponential(1.0, 1.0).unwrap();
        let one = CoagKernel::constant(1.0);
        let r = f_infinity(&one, &FragKernel::constant(1.0), &g, 0.5, &DEFAULT_PROBES).unwrap();
        assert_relative_eq!(r.value, (-0.5f64).exp(), max_relative = 1e-14);
        assert!(r.spread < 1e-14);

        let gy = BoundaryDatum::power_exp(1.0, -1.0, 1.0).unwrap();
        let fr = FragKernel::custom(|x, y| x * y / (x + y));
        for x in [0.1, 0.5, 0.9] {
            let r = f_infinity(&one, &fr, &gy, x, &DEFAULT_PROBES).unwrap();
            assert_relative_eq!(r.value, x * (-x).exp(), max_relative = 1e-13);
            assert!(r.spread < 1e-13);
        }

        let r = f_infinity(&CoagKernel::multiplicative(1.0), &FragKernel::constant(1.0), &g, 0.5, &[1.5, 2.0, 3.0]).unwrap();
        // Ratios e^{-0.5}/(0.5 y) differ across probes.
        assert!(r.spread > 1e-6);

        let err = f_infinity(&one, &FragKernel::constant(1.0), &BoundaryDatum::zero(), 0.5, &DEFAULT_PROBES);
        assert!(matches!(err, Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn spread_is_scale_invariant_for_constructed_pairs() {
        let fr = FragKernel::custom(|x, y| x * y / (x + y));
        let one = CoagKernel::constant(1.0);
        for c in [0.1, 1.0, 37.0] {
            let g = BoundaryDatum::power_exp(c, -1.0, 1.0).unwrap();
            let r = f_infinity(&one, &fr, &g, 0.3, &DEFAULT_PROBES).unwrap();
            assert!(r.spread < 1e-13);
            assert_relative_eq!(r.value, 0.3 * (-0.3f64).exp(), max_relative = 1e-13);
        }
    }

    #[test]
    fn detailed_balance_examples() {
        let q = Profile::exponential(1.0, 1.0);
        let one = CoagKernel::constant(1.0);
        assert!(check_detailed_balance(&one, &FragKernel::constant(1.0), &q, 1000, 1) < 1e-14);
        assert_relative_eq!(check_detailed_balance(&one, &FragKernel::constant(2.0), &q, 1000, 1), 1.0, max_relative = 1e-12);
        let qp = Profile::PowerExp(PowerExp { amplitude: 2.0, power: 0.5, decay: 1.5 });
        for k in [CoagKernel::constant(1.0), CoagKernel::additive(1.0), CoagKernel::bound_form(1.0, 0.5, 0.5)] {
            let f = FragKernel::detailed_balance(&k, qp.clone()).unwrap();
            assert!(check_detailed_balance(&k, &f, &qp, 2000, 7) <= 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        let grid = Arc::new(Grid::new(200, GridKind::Uniform).unwrap());
        let q: Vec<f64> = grid.pivots().iter().map(|x| (-x).exp()).collect();
        let eq = StateMeasure::new(grid.clone(), q.iter().zip(grid.widths()).map(|(a, w)| a * w).collect(), 0.0).unwrap();
        assert!(entropy(&eq, &q).unwrap().abs() < 1e-15);
        let zero = StateMeasure::zeros(grid.clone());
        assert_relative_eq!(entropy(&zero, &q).unwrap(), 1.0 - e1(), max_relative = 1e-5);
        let twice = StateMeasure::new(grid.clone(), eq.cells().iter().map(|c| 2.0 * c).collect(), 0.0).unwrap();
        let expect = (2.0 * 2f64.ln() - 1.0) * (1.0 - e1());
        assert_relative_eq!(entropy(&twice, &q).unwrap(), expect, max_relative = 1e-5);
        let mut bad = q.clone();
        bad[3] = 0.0;
        assert!(matches!(entropy(&eq, &bad), Err(Error::SingularProfile(_))));
    }

    fn db_tables(n: usize) -> (Arc<Grid>, RhsTables, Vec<f64>) {
        let grid = Arc::new(Grid::new(n, GridKind::Uniform).unwrap());
        let model = Model::new(CoagKernel::constant(1.0), FragKernel::constant(1.0), BoundaryDatum::exponential(1.0, 1.0).unwrap());
        let tables = RhsTables::new(&model, grid.clone(), 4).unwrap();
        let q = grid.pivots().iter().map(|x| (-x).exp()).collect();
        (grid, tables, q)
    }

    #[test]
    fn dissipation_examples() {
        assert_relative_eq!(d_log(1f64.exp(), 1.0), 1f64.exp() - 1.0, max_relative = 1e-15);
        // A lattice grid keeps merge points on pivots, so f∞ is exactly stationary.
        let grid = Arc::new(Grid::new(64, GridKind::Lattice).unwrap());
        let model = Model::new(CoagKernel::constant(1.0), FragKernel::constant(1.0), BoundaryDatum::exponential(1.0, 1.0).unwrap());
        let tables = RhsTables::new(&model, grid.clone(), 4).unwrap();
        let prof = equilibrium_profile(&model.coag, &model.frag, &model.boundary, &grid, &DEFAULT_PROBES).unwrap();
        let s = prof.to_state(grid.clone()).unwrap();
        let r = dissipation(&s, &tables, &prof.values, 0.0).unwrap();
        assert!(r.d1 < 1e-10 && r.d2 < 1e-10 && r.d3 < 1e-10, "{r:?}");

        let (grid, tables, q) = db_tables(200);
        let s = StateMeasure::new(grid.clone(), q.iter().zip(grid.widths()).map(|(a, w)| 2.0 * a * w).collect(), 0.0).unwrap();
        let r = dissipation(&s, &tables, &q, 0.0).unwrap();
        // G(x) = ∫₁^∞ e^{-y} dy = e^{-1} for K ≡ 1.
        let expect = e1() * 2f64.ln() * (1.0 - e1());
        assert_relative_eq!(r.d3, expect, max_relative = 1e-4);
        assert!(r.d1 > 0.0 && r.d2 > 0.0);
        assert_eq!(r.d2_unhalved, 2.0 * r.d2);
    }

    #[test]
    fn dissipation_on_exact_pivot_state() {
        let (grid, tables, q) = db_tables(50);
        let s = StateMeasure::new(grid.clone(), q.iter().zip(grid.widths()).map(|(a, w)| a * w).collect(), 0.0).unwrap();
        let r = dissipation(&s, &tables, &q, 0.0).unwrap();
        assert!(r.d2 < 1e-25);
        assert!(r.d3 < 1e-25);
    }

    #[test]
    fn decay_fit_examples() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let m: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        let fit = fit_series(&t, &m, (0.0, 5.0), DecayMode::Exponential).unwrap();
        assert_relative_eq!(fit.rate, 2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, max_relative = 1e-12);
        let t: Vec<f64> = (1..40).map(|k| k as f64).collect();
        let m: Vec<f64> = t.iter().map(|t| t.powi(-3)).collect();
        let fit = fit_series(&t, &m, (1.0, 40.0), DecayMode::Power).unwrap();
        assert_relative_eq!(fit.rate, 3.0, max_relative = 1e-12);
        assert!(matches!(fit_series(&t[..5], &m[..5], (0.0, 10.0), DecayMode::Power), Err(Error::Fit(_))));
        let mut bad = m.clone();
        bad[3] = 0.0;
        assert!(matches!(fit_series(&t, &bad, (1.0, 40.0), DecayMode::Power), Err(Error::Fit(_))));
    }

    #[test]
    fn ledger_without_boundary_is_monotone_count() {
        use crate::solver::{run, SnapshotPolicy, SolverConfig};
        let grid = Arc::new(Grid::new(32, GridKind::Uniform).unwrap());
        let model = Model::new(CoagKernel::constant(1.0), FragKernel::zero(), BoundaryDatum::zero());
        let tables = RhsTables::new(&model, grid.clone(), 4).unwrap();
        let s = StateMeasure::from_density(|_| 1.0, grid).unwrap();
        let cfg = SolverConfig { t_final: 2.0, dt_max: 0.01, snapshots: SnapshotPolicy::Interval(0.1), ..Default::default() };
        let traj = run(&s, &tables, &cfg).unwrap();
        let ledger = negative_moment_check(&traj, 1.0, 0.5, 0.5, &BoundaryDatum::zero(), 1e-3).unwrap();
        assert!(ledger.iter().all(|e| e.ok && e.integral == 0.0));
        assert!(ledger.windows(2).all(|w| w[1].m0 <= w[0].m0));
        let ledger = negative_moment_check(&traj, 0.0, 0.5, 0.5, &BoundaryDatum::exponential(1.0, 1.0).unwrap(), 1e-3).unwrap();
        assert!(ledger.iter().all(|e| e.integral == 0.0));
    }

    #[test]
    fn weak_differences_vanish_on_profile() {
        let grid = Arc::new(Grid::new(400, GridKind::Uniform).unwrap());
        let q = Profile::exponential(1.0, 1.0);
        let s = StateMeasure::from_density(|x| (-x).exp(), grid).unwrap();
        let d = weak_differences(&s, &q, &TestFunction::battery());
        assert_eq!(d.len(), 20);
        assert!(d.iter().all(|v| v.abs() < 1e-4), "{d:?}");
    }

    #[test]
    fn gronwall_examples() {
        assert_eq!(gronwall_bound(2.0, 0.0, 5.0, 3.0), 2.0);
        assert_relative_eq!(gronwall_bound(1.0, 1.0, e1(), 1.0), (1.0 + 2.0 * e1()) * 1f64.exp(), max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn d_log_nonnegative(a in 1e-12f64..1e6, b in 1e-12f64..1e6) {
            let d = d_log(a, b);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d_log(a, a), 0.0);
            if (a - b).abs() > 1e-9 * a.max(b) {
                prop_assert!(d > 0.0);
            }
        }

        #[test]
        fn entropy_density_nonnegative(u in 0f64..1e4, q in 1e-10f64..1e4) {
            prop_assert!(entropy_density(u, q) >= -1e-12 * q.max(u));
            prop_assert!(entropy_density(q, q).abs() <= 1e-12 * q);
        }
    }
}
