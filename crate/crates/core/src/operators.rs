//! Discrete right-hand side of the boundary-valued equation and the weak-form
//! operators `A`, `B` used to check it.
//!
//! Coagulation products are assigned to the two pivots bracketing `x_i + x_j`
//! with weights that conserve both number and mass; a merge reaching size 1
//! puts one cluster into the endpoint atom and records the excess mass as exited.

use std::sync::Arc;

use crate::boundary::{BoundaryDatum, BoundaryTables};
use crate::error::{Error, Result};
use crate::kernel::{CoagModel, FragKernel, RateKernel};
use crate::quadrature::GaussLegendre;
use crate::state::{ContributionTotals, Grid, StateMeasure, TestFunction, Trajectory};

/// Kernels and boundary datum of one scenario.
#[derive(Clone, Debug)]
pub struct Model {
    pub coag: CoagModel,
    pub frag: FragKernel,
    pub boundary: BoundaryDatum,
    /// Use the truncated kernel in `G` as well.
    pub truncated_sink: bool,
    /// Let the endpoint atom feel `G(t, 1)`.
    pub atom_sink: bool,
}

impl Model {
    pub fn new(coag: impl Into<CoagModel>, frag: FragKernel, boundary: BoundaryDatum) -> Self {
        Self { coag: coag.into(), frag, boundary, truncated_sink: false, atom_sink: false }
    }

    pub fn with_atom_sink(mut self, on: bool) -> Self {
        self.atom_sink = on;
        self
    }

    pub fn with_truncated_sink(mut self, on: bool) -> Self {
        self.truncated_sink = on;
        self
    }

    /// Kernel entering `G`.
    pub fn sink_kernel(&self) -> &dyn RateKernel {
        if self.truncated_sink {
            &self.coag
        } else {
            self.coag.base()
        }
    }
}

/// Where the product of a merge goes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MergeTarget {
    /// `lo` gets the fraction `w_lo`, `hi` the rest.
    Split { lo: u32, hi: u32, w_lo: f64 },
    /// Size 1 or more. The fraction `interior` of the cell pair that sums below 1
    /// goes to the last cell as in `Top` with `top_excess = v − x_{n-1}`; the
    /// rest goes to the atom and `excess = v − 1` leaves.
    Overflow { excess: f64, interior: f64, top_excess: f64 },
    /// Above the last pivot but below 1: the count stays in the last cell and
    /// the mass beyond its pivot leaves.
    Top { excess: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Pair {
    i: u32,
    j: u32,
    k: f64,
    target: MergeTarget,
}

/// Fraction of the rectangle `[a1, b1] × [a2, b2]` where `u + w < 1`.
fn below_one(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    // The integrand is piecewise linear in `u` with kinks at `1 − b2` and `1 − a2`.
    let len = |u: f64| (1.0 - u).clamp(a2, b2) - a2;
    let mut cuts = vec![a1, b1];
    for c in [1.0 - b2, 1.0 - a2] {
        if c > a1 && c < b1 {
            cuts.push(c);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let area: f64 = cuts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (len(w[0]) + len(w[1]))).sum();
    (area / ((b1 - a1) * (b2 - a2))).clamp(0.0, 1.0)
}

/// Two-pivot allocation of a cluster of size `v` with `x_0 ≤ v ≤ x_{n-1}`.
fn allocate(pivots: &[f64], v: f64) -> (usize, usize, f64) {
    let n = pivots.len();
    let k = pivots.partition_point(|&p| p <= v);
    if k == 0 {
        return (0, 0, 1.0);
    }
    let lo = k - 1;
    if k == n || v == pivots[lo] {
        return (lo, lo, 1.0);
    }
    let (xl, xh) = (pivots[lo], pivots[k]);
    if xh == xl {
        return (lo, lo, 1.0);
    }
    (lo, k, (xh - v) / (xh - xl))
}

/// Precomputed coagulation pairs, fragmentation split matrix and boundary tables.
#[derive(Clone, Debug)]
pub struct RhsTables {
    grid: Arc<Grid>,
    pairs: Vec<Pair>,
    frag_loss: Vec<f64>,
    frag_split: Vec<f64>,
    boundary: BoundaryTables,
    atom_sink: bool,
    model: Model,
    quad_n: usize,
}

impl RhsTables {
    pub fn new(model: &Model, grid: Arc<Grid>, quad_n: usize) -> Result<Self> {
        let n = grid.len();
        let x = grid.pivots();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i..n {
                let k = model.coag.rate(x[i], x[j]);
                if k == 0.0 {
                    continue;
                }
                if !(k.is_finite() && k > 0.0) {
                    return Err(Error::Domain(format!("K({}, {}) = {k}", x[i], x[j])));
                }
                let target = if grid.is_lattice() {
                    let s = i + j + 2;
                    if s <= n {
                        MergeTarget::Split { lo: (s - 1) as u32, hi: (s - 1) as u32, w_lo: 1.0 }
                    } else {
                        MergeTarget::Overflow { excess: s as f64 / n as f64 - 1.0, interior: 0.0, top_excess: 0.0 }
                    }
                } else {
                    let v = x[i] + x[j];
                    if v >= 1.0 {
                        let e = grid.edges();
                        let interior = below_one(e[i], e[i + 1], e[j], e[j + 1]);
                        MergeTarget::Overflow { excess: v - 1.0, interior, top_excess: v - x[n - 1] }
                    } else if v > x[n - 1] {
                        MergeTarget::Top { excess: v - x[n - 1] }
                    } else {
                        let (lo, hi, w_lo) = allocate(x, v);
                        MergeTarget::Split { lo: lo as u32, hi: hi as u32, w_lo }
                    }
                };
                pairs.push(Pair { i: i as u32, j: j as u32, k, target });
            }
        }
        let (frag_loss, frag_split) = if model.frag.is_zero() {
            (vec![0.0; n], vec![0.0; n * n])
        } else if grid.is_lattice() {
            lattice_fragmentation(&model.frag, &grid)
        } else {
            sectional_fragmentation(&model.frag, &grid, quad_n)?
        };
        let boundary = BoundaryTables::new(model.sink_kernel(), &model.frag, &model.boundary, &grid)?;
        Ok(Self {
            grid,
            pairs,
            frag_loss,
            frag_split,
            boundary,
            atom_sink: model.atom_sink,
            model: model.clone(),
            quad_n,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn boundary(&self) -> &BoundaryTables {
        &self.boundary
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn atom_sink(&self) -> bool {
        self.atom_sink
    }

    /// Total fragmentation rate of a cluster at pivot `i`.
    pub fn frag_loss_rate(&self, i: usize) -> f64 {
        self.frag_loss[i]
    }

    /// Expected fragments landing in cell `k` per fragmenting cluster of cell `j`.
    pub fn frag_split(&self, j: usize, k: usize) -> f64 {
        self.frag_split[j * self.grid.len() + k]
    }

    /// Destination of a merge of cells `i ≤ j`; `None` when `K` vanishes there.
    pub fn merge_target(&self, i: usize, j: usize) -> Option<MergeTarget> {
        self.pairs.iter().find(|p| p.i as usize == i && p.j as usize == j).map(|p| p.target)
    }

    fn check_grid(&self, s: &StateMeasure) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, s.grid()) && *self.grid != **s.grid() {
            return Err(Error::Config("state grid does not match the tables".into()));
        }
        Ok(())
    }

    pub fn rhs(&self, s: &StateMeasure, t: f64) -> Result<RhsBreakdown> {
        self.check_grid(s)?;
        let mut out = RhsBreakdown::zeros(self.grid.len());
        self.eval_into(s.cells(), s.atom(), t, &mut out);
        Ok(out)
    }

    /// Fills `out` for cell counts `c` and atom `a`.
    pub fn eval_into(&self, c: &[f64], a: f64, t: f64, out: &mut RhsBreakdown) {
        let n = self.grid.len();
        out.reset();
        let x = self.grid.pivots();
        for p in &self.pairs {
            let (i, j) = (p.i as usize, p.j as usize);
            let (ci, cj) = (c[i], c[j]);
            if ci == 0.0 || cj == 0.0 {
                continue;
            }
            let r = if i == j { 0.5 * p.k * ci * ci } else { p.k * ci * cj };
            out.coag_loss[i] += r;
            out.coag_loss[j] += r;
            match p.target {
                MergeTarget::Split { lo, hi, w_lo } => {
                    out.coag_gain[lo as usize] += w_lo * r;
                    let rest = r - w_lo * r;
                    if rest != 0.0 {
                        out.coag_gain[hi as usize] += rest;
                    }
                }
                MergeTarget::Overflow { excess, interior, top_excess } => {
                    let r_in = interior * r;
                    out.coag_gain[n - 1] += r_in;
                    out.atom_gain += r - r_in;
                    out.exited_mass_rate += r_in * top_excess + (r - r_in) * excess;
                }
                MergeTarget::Top { excess } => {
                    out.coag_gain[n - 1] += r;
                    out.exited_mass_rate += r * excess;
                }
            }
        }
        for j in 0..n {
            let cj = c[j];
            if cj == 0.0 || self.frag_loss[j] == 0.0 {
                continue;
            }
            out.frag_loss[j] += self.frag_loss[j] * cj;
            let row = &self.frag_split[j * n..j * n + j + 1];
            for (k, s) in row.iter().enumerate() {
                out.frag_gain[k] += s * cj;
            }
        }
        let m = self.boundary.factor(t);
        let base = self.boundary.base();
        let w = self.grid.widths();
        for i in 0..n {
            out.boundary_sink[i] = m * base.g[i] * c[i];
            out.source[i] = m * base.c[i] * w[i];
        }
        out.atom_sink = if self.atom_sink { m * base.g_atom * a } else { 0.0 };
        let mut mass_source = 0.0;
        let mut mass_sink = 0.0;
        for i in 0..n {
            out.dc[i] = out.coag_gain[i] - out.coag_loss[i] + out.frag_gain[i] - out.frag_loss[i] + out.source[i]
                - out.boundary_sink[i];
            mass_source += x[i] * out.source[i];
            mass_sink += x[i] * out.boundary_sink[i];
        }
        out.da = out.atom_gain - out.atom_sink;
        out.mass_source = mass_source;
        out.mass_sink = mass_sink + out.atom_sink;
    }
}

fn lattice_fragmentation(f: &FragKernel, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let h = 1.0 / n as f64;
    let mut loss = vec![0.0; n];
    let mut split = vec![0.0; n * n];
    for i in 2..=n {
        for l in 1..i {
            let r = h * f.rate(l as f64 * h, (i - l) as f64 * h);
            split[(i - 1) * n + (l - 1)] += r;
            loss[i - 1] += 0.5 * r;
        }
    }
    (loss, split)
}

fn sectional_fragmentation(f: &FragKernel, grid: &Grid, quad_n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.len();
    let x = grid.pivots();
    let e = grid.edges();
    let rule = GaussLegendre::new(quad_n.max(1));
    let mut loss = vec![0.0; n];
    let mut split = vec![0.0; n * n];
    let x0 = x[0];
    for j in 1..n {
        let xj = x[j];
        if xj < 2.0 * x0 {
            continue;
        }
        let mut cuts: Vec<f64> = vec![0.0, xj];
        for &b in &e[1..n] {
            if b < xj {
                cuts.push(b);
                cuts.push(xj - b);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * xj);
        let row = &mut split[j * n..(j + 1) * n];
        for w in cuts.windows(2) {
            for (y, wt) in rule.mapped(w[0], w[1]) {
                let r = 0.5 * wt * f.rate(xj - y, y);
                if r == 0.0 {
                    continue;
                }
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::Domain(format!("F({}, {y}) = {r}", xj - y)));
                }
                // Keep both fragments on or above the first pivot, preserving their sum.
                let (mut u, mut v) = (y.min(xj - y), y.max(xj - y));
                if u < x0 {
                    v -= x0 - u;
                    u = x0;
                }
                loss[j] += r;
                for frag in [u, v] {
                    let (lo, hi, w_lo) = allocate(x, frag);
                    row[lo] += w_lo * r;
                    if hi != lo {
                        row[hi] += (1.0 - w_lo) * r;
                    }
                }
            }
        }
    }
    Ok((loss, split))
}

/// Every contribution to `dc/dt` and `da/dt`, as count rates.
#[derive(Clone, Debug, PartialEq)]
pub struct RhsBreakdown {
    pub coag_gain: Vec<f64>,
    pub coag_loss: Vec<f64>,
    /// Merges deposited in the atom.
    pub atom_gain: f64,
    pub frag_gain: Vec<f64>,
    pub frag_loss: Vec<f64>,
    pub boundary_sink: Vec<f64>,
    pub source: Vec<f64>,
    pub atom_sink: f64,
    /// Mass lost when a merge product is placed at a smaller size: the excess over 1
    /// for atom deposits, over the top pivot for merges kept in the last cell.
    pub exited_mass_rate: f64,
    pub mass_source: f64,
    pub mass_sink: f64,
    pub dc: Vec<f64>,
    pub da: f64,
}

impl RhsBreakdown {
    pub fn zeros(n: usize) -> Self {
        Self {
            coag_gain: vec![0.0; n],
            coag_loss: vec![0.0; n],
            atom_gain: 0.0,
            frag_gain: vec![0.0; n],
            frag_loss: vec![0.0; n],
            boundary_sink: vec![0.0; n],
            source: vec![0.0; n],
            atom_sink: 0.0,
            exited_mass_rate: 0.0,
            mass_source: 0.0,
            mass_sink: 0.0,
            dc: vec![0.0; n],
            da: 0.0,
        }
    }

    fn reset(&mut self) {
        for v in [
            &mut self.coag_gain,
            &mut self.coag_loss,
            &mut self.frag_gain,
            &mut self.frag_loss,
            &mut self.boundary_sink,
            &mut self.source,
            &mut self.dc,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.atom_gain = 0.0;
        self.atom_sink = 0.0;
        self.exited_mass_rate = 0.0;
        self.mass_source = 0.0;
        self.mass_sink = 0.0;
        self.da = 0.0;
    }

    /// `m_1` rate predicted by the budget: source − sink − exited.
    pub fn mass_budget(&self) -> f64 {
        self.mass_source - self.mass_sink - self.exited_mass_rate
    }

    pub fn totals(&self) -> ContributionTotals {
        let s = |v: &[f64]| v.iter().sum::<f64>();
        ContributionTotals {
            coag_gain: s(&self.coag_gain),
            coag_overflow: self.atom_gain,
            coag_loss: s(&self.coag_loss),
            boundary_sink: s(&self.boundary_sink),
            frag_loss: s(&self.frag_loss),
            frag_gain: s(&self.frag_gain),
            source: s(&self.source),
            atom_sink: self.atom_sink,
        }
    }
}

/// `A[φ](x, y) = φ̄(x + y) − φ(x) − φ(y)`.
pub fn apply_a(phi: &TestFunction, x: f64, y: f64) -> f64 {
    phi.eval(x + y) - phi.eval(x) - phi.eval(y)
}

/// `B[φ](x) = ½ ∫_0^x F(x − y, y)(φ(x) − φ(x − y) − φ(y)) dy`, folded onto `(0, x/2)`.
pub fn apply_b(phi: &TestFunction, f: &FragKernel, x: f64, quad_n: usize) -> f64 {
    if x <= 0.0 || f.is_zero() {
        return 0.0;
    }
    let rule = GaussLegendre::new(quad_n.max(1));
    apply_b_with(phi, f, x, &rule)
}

fn apply_b_with(phi: &TestFunction, f: &FragKernel, x: f64, rule: &GaussLegendre) -> f64 {
    let half = 0.5 * x;
    let mut cuts = vec![0.0, half];
    for &b in phi.breaks() {
        if b < half {
            cuts.push(b);
        }
        if x - b > 0.0 && x - b < half {
            cuts.push(x - b);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let px = phi.eval(x);
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        for (y, wt) in rule.mapped(w[0], w[1]) {
            acc += wt * f.rate(x - y, y) * (px - phi.eval(x - y) - phi.eval(y));
        }
    }
    acc
}

/// The weak-form integrand for one test function, precomputed on the grid.
pub struct WeakIntegrand {
    pair_coef: Vec<(u32, u32, f64)>,
    /// `G_i φ(x_i)` at unit modulation.
    g_phi: Vec<f64>,
    /// `B[φ](x_i)`.
    b_phi: Vec<f64>,
    atom_coef: f64,
    /// `∫_0^1 C φ dx` at unit modulation.
    source_base: f64,
    boundary: BoundaryTables,
}

impl WeakIntegrand {
    pub fn new(tables: &RhsTables, phi: &TestFunction) -> Result<Self> {
        let grid = tables.grid();
        let x = grid.pivots();
        let model = tables.model();
        let pair_coef = tables
            .pairs
            .iter()
            .map(|p| {
                let (i, j) = (p.i as usize, p.j as usize);
                // Ordered double sum with the ½: off-diagonal pairs appear twice.
                let w = if i == j { 0.5 } else { 1.0 };
                (p.i, p.j, w * p.k * apply_a(phi, x[i], x[j]))
            })
            .collect();
        let rule = GaussLegendre::new(tables.quad_n.max(8));
        let base = tables.boundary().base();
        let g_phi = x.iter().zip(&base.g).map(|(&xi, g)| g * phi.eval(xi)).collect();
        let b_phi = x
            .iter()
            .map(|&xi| if model.frag.is_zero() { 0.0 } else { apply_b_with(phi, &model.frag, xi, &rule) })
            .collect();
        let atom_coef = if tables.atom_sink() { base.g_atom * phi.eval(1.0) } else { 0.0 };
        let source_base = if model.boundary.is_zero() {
            0.0
        } else {
            let gl = GaussLegendre::new(4);
            let mut acc = 0.0;
            for w in grid.edges().windows(2) {
                let mut pieces = vec![w[0], w[1]];
                for &b in phi.breaks() {
                    if b > w[0] && b < w[1] {
                        pieces.push(b);
                    }
                }
                pieces.sort_by(f64::total_cmp);
                for q in pieces.windows(2) {
                    for (y, wt) in gl.mapped(q[0], q[1]) {
                        acc += wt * model.boundary.base_c(&model.frag, y)? * phi.eval(y);
                    }
                }
            }
            acc
        };
        Ok(Self { pair_coef, g_phi, b_phi, atom_coef, source_base, boundary: tables.boundary().clone() })
    }

    /// `½⟨μ⊗μ, K A[φ]⟩ − ⟨μ, Gφ + B[φ]⟩ + ⟨L, Cφ⟩` at time `t`.
    ///
    /// The atom only enters through the optional sink, as in the solver.
    pub fn eval(&self, s: &StateMeasure, t: f64) -> f64 {
        let c = s.cells();
        let mut acc = 0.0;
        for &(i, j, coef) in &self.pair_coef {
            acc += coef * c[i as usize] * c[j as usize];
        }
        let m = self.boundary.factor(t);
        for (i, &ci) in c.iter().enumerate() {
            acc -= ci * (m * self.g_phi[i] + self.b_phi[i]);
        }
        acc -= m * self.atom_coef * s.atom();
        acc + m * self.source_base
    }
}

/// `|⟨μ_t, φ⟩ − ⟨μ_in, φ⟩ − ∫_0^t (…) ds|` at every snapshot, trapezoid in time.
pub fn weak_residual_series(traj: &Trajectory, tables: &RhsTables, phi: &TestFunction) -> Result<Vec<f64>> {
    if traj.is_empty() {
        return Ok(Vec::new());
    }
    let integrand = WeakIntegrand::new(tables, phi)?;
    let p0 = traj.states[0].pair_test(phi);
    let mut out = Vec::with_capacity(traj.len());
    let mut integral = 0.0;
    let mut prev = integrand.eval(&traj.states[0], traj.times[0]);
    out.push(0.0);
    for k in 1..traj.len() {
        let cur = integrand.eval(&traj.states[k], traj.times[k]);
        integral += 0.5 * (traj.times[k] - traj.times[k - 1]) * (prev + cur);
        prev = cur;
        out.push((traj.states[k].pair_test(phi) - p0 - integral).abs());
    }
    Ok(out)
}

/// Residual at the snapshot time `t`.
pub fn weak_residual(traj: &Trajectory, tables: &RhsTables, phi: &TestFunction, t: f64) -> Result<f64> {
    let k = traj
        .index_of(t)
        .ok_or_else(|| Error::Domain(format!("t = {t} is not a snapshot time")))?;
    Ok(weak_residual_series(traj, tables, phi)?[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryDatum;
    use crate::kernel::{CoagKernel, FragKernel};
    use crate::state::GridKind;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(n, GridKind::Lattice).unwrap())
    }

    fn singular_model() -> Model {
        Model::new(
            CoagKernel::bound_form(1.0, 0.5, 0.5).truncate(20).unwrap(),
            FragKernel::power(1.0, 0.5),
            BoundaryDatum::exponential(1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn monodisperse_lattice_rates() {
        let g = lattice(8);
        let m = Model::new(CoagKernel::constant(1.0), FragKernel::zero(), BoundaryDatum::zero());
        let t = RhsTables::new(&m, g.clone(), 4).unwrap();
        let mut c = vec![0.0; 8];
        c[0] = 1.0;
        let r = t.rhs(&StateMeasure::new(g, c, 0.0).unwrap(), 0.0).unwrap();
        assert_eq!(r.dc[0], -1.0);
        assert_eq!(r.dc[1], 0.5);
        assert!(r.dc[2..].iter().all(|&v| v == 0.0));
        assert_eq!(r.da, 0.0);
    }

    #[test]
    fn zero_state_feels_only_the_source() {
        let g = Arc::new(Grid::new(4, GridKind::Uniform).unwrap());
        let m = Model::new(CoagKernel::constant(1.0), FragKernel::constant(1.0), BoundaryDatum::exponential(1.0, 1.0).unwrap());
        let t = RhsTables::new(&m, g.clone(), 4).unwrap();
        let r = t.rhs(&StateMeasure::zeros(g), 0.0).unwrap();
        for &v in &r.dc {
            assert_relative_eq!(v, 0.25 * (-1.0f64).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn atom_sink_toggle() {
        let g = Arc::new(Grid::new(4, GridKind::Uniform).unwrap());
        let datum = BoundaryDatum::exponential(1.0, 1.0).unwrap();
        let s = StateMeasure::atom_only(g.clone(), 1.0).unwrap();
        let off = Model::new(CoagKernel::constant(1.0), FragKernel::zero(), datum.clone());
        let r = RhsTables::new(&off, g.clone(), 4).unwrap().rhs(&s, 0.0).unwrap();
        assert_eq!(r.da, 0.0);
        let on = off.with_atom_sink(true);
        let r = RhsTables::new(&on, g.clone(), 4).unwrap().rhs(&s, 0.0).unwrap();
        assert_relative_eq!(r.da, -(-1.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let m = singular_model();
        let t = RhsTables::new(&m, Arc::new(Grid::new(8, GridKind::Uniform).unwrap()), 4).unwrap();
        let other = Arc::new(Grid::new(9, GridKind::Uniform).unwrap());
        assert!(matches!(t.rhs(&StateMeasure::zeros(other), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn apply_a_examples() {
        let id = TestFunction::identity();
        assert_relative_eq!(apply_a(&id, 0.6, 0.6), -0.2, epsilon = 1e-15);
        assert_eq!(apply_a(&id, 0.25, 0.25), 0.0);
        assert_eq!(apply_a(&TestFunction::ramp(1e-6), 0.5, 0.5), -1.0);
    }

    #[test]
    fn apply_b_examples() {
        let id = TestFunction::identity();
        for f in [FragKernel::constant(1.0), FragKernel::power(2.0, 0.5), FragKernel::multiplicative(3.0)] {
            assert!(apply_b(&id, &f, 0.7, 8).abs() < 1e-15);
        }
        let b = apply_b(&TestFunction::ramp(1e-9), &FragKernel::constant(1.0), 0.8, 8);
        assert!((b + 0.4).abs() < 1e-8);
    }

    #[test]
    fn weak_residual_is_zero_at_start() {
        let g = Arc::new(Grid::new(16, GridKind::Uniform).unwrap());
        let t = RhsTables::new(&singular_model(), g.clone(), 4).unwrap();
        let mut tr = Trajectory::new();
        tr.push(0.0, StateMeasure::from_density(|_| 1.0, g).unwrap(), Default::default()).unwrap();
        assert_eq!(weak_residual(&tr, &t, &TestFunction::identity(), 0.0).unwrap(), 0.0);
    }

    fn random_state(rng: &mut ChaCha8Rng, g: &Arc<Grid>) -> StateMeasure {
        let cells = (0..g.len()).map(|_| rng.random_range(0.0..2.0)).collect();
        StateMeasure::new(g.clone(), cells, rng.random_range(0.0..1.0)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mass_budget_closes(seed in 0u64..10_000, atom_sink in any::<bool>(), geometric in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = if geometric { GridKind::Geometric { ratio: 1.25 } } else { GridKind::Uniform };
            let g = Arc::new(Grid::new(24, kind).unwrap());
            let m = singular_model().with_atom_sink(atom_sink);
            let t = RhsTables::new(&m, g.clone(), 4).unwrap();
            let s = random_state(&mut rng, &g);
            let r = t.rhs(&s, 0.0).unwrap();
            let x = g.pivots();
            let dm1: f64 = r.dc.iter().zip(x).map(|(d, x)| d * x).sum::<f64>() + r.da;
            let scale = r.mass_source + r.mass_sink + r.exited_mass_rate
                + r.coag_loss.iter().zip(x).map(|(l, x)| l * x).sum::<f64>()
                + r.frag_loss.iter().zip(x).map(|(l, x)| l * x).sum::<f64>();
            prop_assert!((dm1 - r.mass_budget()).abs() <= 1e-12 * scale);
            // One explicit Euler step.
            let dt = 1e-3;
            let after: f64 = s.cells().iter().zip(&r.dc).zip(x).map(|((c, d), x)| (c + dt * d) * x).sum::<f64>()
                + s.atom() + dt * r.da;
            let before = s.moment(1.0);
            prop_assert!(((after - before) - dt * r.mass_budget()).abs() <= 1e-12 * (before + dt * scale));
        }

        #[test]
        fn pivot_allocation_conserves_number_and_mass(n in 4usize..80, ratio in 1.05f64..1.6) {
            let g = Arc::new(Grid::new(n, GridKind::Geometric { ratio }).unwrap());
            let m = Model::new(CoagKernel::constant(1.0), FragKernel::zero(), BoundaryDatum::zero());
            let t = RhsTables::new(&m, g.clone(), 4).unwrap();
            let x = g.pivots();
            for i in 0..n {
                for j in i..n {
                    match t.merge_target(i, j).unwrap() {
                        MergeTarget::Split { lo, hi, w_lo } => {
                            prop_assert!((0.0..=1.0).contains(&w_lo));
                            let mass = w_lo * x[lo as usize] + (1.0 - w_lo) * x[hi as usize];
                            prop_assert!((mass - (x[i] + x[j])).abs() <= 1e-14);
                        }
                        MergeTarget::Overflow { excess, interior, top_excess } => {
                            prop_assert!((excess - (x[i] + x[j] - 1.0)).abs() <= 1e-15);
                            prop_assert!((0.0..=1.0).contains(&interior));
                            prop_assert!(top_excess >= excess);
                        }
                        MergeTarget::Top { excess } => {
                            prop_assert!(x[i] + x[j] < 1.0);
                            prop_assert!((excess - (x[i] + x[j] - x[n - 1])).abs() <= 1e-15);
                        }
                    }
                }
            }
        }

        #[test]
        fn fragmentation_conserves_number_and_mass(n in 4usize..60, uniform in any::<bool>()) {
            let kind = if uniform { GridKind::Uniform } else { GridKind::Geometric { ratio: 1.3 } };
            let g = Arc::new(Grid::new(n, kind).unwrap());
            let m = Model::new(CoagKernel::constant(0.0), FragKernel::power(1.0, 0.5), BoundaryDatum::zero());
            let t = RhsTables::new(&m, g.clone(), 4).unwrap();
            let x = g.pivots();
            for j in 0..n {
                let count: f64 = (0..n).map(|k| t.frag_split(j, k)).sum();
                let mass: f64 = (0..n).map(|k| t.frag_split(j, k) * x[k]).sum();
                let lam = t.frag_loss_rate(j);
                prop_assert!((count - 2.0 * lam).abs() <= 1e-12 * lam.max(1e-300));
                prop_assert!((mass - lam * x[j]).abs() <= 1e-12 * lam.max(1e-300));
            }
        }

        #[test]
        fn lemma_bounds_on_random_test_functions(seed in 0u64..5000, x in 1e-4f64..=1.0, y in 1e-4f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = TestFunction::random(&mut rng, 10);
            let k = CoagKernel::bound_form(1.0, 0.5, 0.5);
            prop_assert!(k.rate(x, y) * apply_a(&phi, x, y).abs() <= 8.0 * phi.lipschitz() * (1.0 + 1e-12));
            let f = FragKernel::power(1.0, 0.5);
            prop_assert!(apply_b(&phi, &f, x, 8).abs() <= 3.0 * phi.sup_norm() * (1.0 + 1e-12));
            let id = TestFunction::identity();
            prop_assert!(apply_a(&id, x, y) <= 1e-15);
        }

        #[test]
        fn below_one_matches_midpoint_count(a1 in 0f64..1.0, w1 in 0.01f64..0.5, a2 in 0f64..1.0, w2 in 0.01f64..0.5) {
            let m = 400;
            let (b1, b2) = (a1 + w1, a2 + w2);
            let mut inside = 0usize;
            for i in 0..m {
                let u = a1 + (i as f64 + 0.5) * w1 / m as f64;
                for j in 0..m {
                    let w = a2 + (j as f64 + 0.5) * w2 / m as f64;
                    if u + w < 1.0 {
                        inside += 1;
                    }
                }
            }
            let est = inside as f64 / (m * m) as f64;
            prop_assert!((below_one(a1, b1, a2, b2) - est).abs() < 5e-3);
        }
    }

    #[test]
    fn below_one_examples() {
        assert_eq!(below_one(0.0, 0.2, 0.0, 0.3), 1.0);
        assert_eq!(below_one(0.6, 0.8, 0.5, 0.7), 0.0);
        assert_relative_eq!(below_one(0.0, 1.0, 0.0, 1.0), 0.5, epsilon = 1e-15);
        // Cells (0.5, 0.75] and (0.25, 0.5]: the line cuts off a corner triangle.
        assert_relative_eq!(below_one(0.5, 0.75, 0.25, 0.5), 0.5, epsilon = 1e-15);
        assert_relative_eq!(below_one(0.5, 0.75, 0.0, 0.25), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn merges_between_top_pivot_and_one_stay_in_the_last_cell() {
        let g = Arc::new(Grid::new(6, GridKind::Geometric { ratio: 1.5 }).unwrap());
        let x = g.pivots().to_vec();
        let n = x.len();
        let m = Model::new(CoagKernel::constant(1.0), FragKernel::zero(), BoundaryDatum::zero());
        let t = RhsTables::new(&m, g.clone(), 4).unwrap();
        let mut seen = 0;
        for i in 0..n {
            for j in i..n {
                let v = x[i] + x[j];
                if v > x[n - 1] && v < 1.0 {
                    seen += 1;
                    assert_eq!(t.merge_target(i, j), Some(MergeTarget::Top { excess: v - x[n - 1] }));
                    // Isolate the (i, j) merges: the cross term for i ≠ j, ½ c² for i = j.
                    let eval = |cells: &[usize]| {
                        let mut c = vec![0.0; n];
                        for &k in cells {
                            c[k] = 1.0;
                        }
                        let mut out = RhsBreakdown::zeros(n);
                        t.eval_into(&c, 0.0, 0.0, &mut out);
                        (out.coag_gain[n - 1], out.atom_gain, out.exited_mass_rate)
                    };
                    let (gain, atom, exited, r) = if i == j {
                        let (g, a, e) = eval(&[i]);
                        (g, a, e, 0.5)
                    } else {
                        let (both, only_i, only_j) = (eval(&[i, j]), eval(&[i]), eval(&[j]));
                        (both.0 - only_i.0 - only_j.0, both.1 - only_i.1 - only_j.1, both.2 - only_i.2 - only_j.2, 1.0)
                    };
                    assert_relative_eq!(gain, r, max_relative = 1e-12);
                    assert!(atom.abs() < 1e-15);
                    assert_relative_eq!(exited, r * (v - x[n - 1]), max_relative = 1e-12);
                }
            }
        }
        assert!(seen > 0);
    }
}
