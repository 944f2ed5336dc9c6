//! Sectional grid on `(0, 1]`, cell-count states with an endpoint atom,
//! piecewise-linear test functions and trajectories.

use std::sync::Arc;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridKind {
    /// Midpoint pivots.
    Uniform,
    /// Geometric-mean pivots, `e_i = ρ^{i-n}`
    Geometric { ratio: f64 },
    /// Uniform cells with pivots on the right edges, `x_i = i/n`.
    Lattice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    kind: GridKind,
    edges: Vec<f64>,
    pivots: Vec<f64>,
    widths: Vec<f64>,
}

impl Grid {
    pub fn new(n: usize, kind: GridKind) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid needs at least 2 cells, got {n}")));
        }
        let mut edges = vec![0.0; n + 1];
        match kind {
            GridKind::Uniform | GridKind::Lattice => {
                for (i, e) in edges.iter_mut().enumerate().skip(1) {
                    *e = i as f64 / n as f64;
                }
            }
            GridKind::Geometric { ratio } => {
                if !(ratio > 1.0 && ratio.is_finite()) {
                    return Err(Error::Config(format!("geometric ratio must exceed 1, got {ratio}")));
                }
                for (i, e) in edges.iter_mut().enumerate().skip(1) {
                    *e = ratio.powi(i as i32 - n as i32);
                }
                if !(edges[1] > 0.0) {
                    return Err(Error::Config(format!("ratio {ratio} with {n} cells underflows the first edge")));
                }
            }
        }
        edges[n] = 1.0;
        let pivots = (1..=n)
            .map(|i| match kind {
                GridKind::Lattice => edges[i],
                GridKind::Uniform => 0.5 * (edges[i - 1] + edges[i]),
                _ if i == 1 => 0.5 * edges[1],
                _ => (edges[i - 1] * edges[i]).sqrt(),
            })
            .collect();
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { kind, edges, pivots, widths })
    }

    /// Geometric grid whose first edge is `smallest`.
    pub fn geometric_from_smallest(n: usize, smallest: f64) -> Result<Self> {
        if !(smallest > 0.0 && smallest < 1.0) || n < 2 {
            return Err(Error::Config(format!("invalid smallest edge {smallest} for {n} cells")));
        }
        let ratio = (-smallest.ln() / (n - 1) as f64).exp();
        Self::new(n, GridKind::Geometric { ratio })
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn pivots(&self) -> &[f64] {
        &self.pivots
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.kind, GridKind::Lattice)
    }

    /// Cell `i` (0-based) with `x ∈ (e_i, e_{i+1}]`.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x > 0.0 && x <= 1.0) {
            return None;
        }
        let k = self.edges.partition_point(|&e| e < x);
        Some(k - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMeasure {
    grid: Arc<Grid>,
    cells: Vec<f64>,
    atom: f64,
}

fn check_entries(cells: &[f64], atom: f64) -> Result<()> {
    if let Some((i, v)) = cells.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("cell {i} holds {v}; counts must be finite and nonnegative")));
    }
    if !(atom.is_finite() && atom >= 0.0) {
        return Err(Error::Domain(format!("atom holds {atom}; it must be finite and nonnegative")));
    }
    Ok(())
}

impl StateMeasure {
    pub fn new(grid: Arc<Grid>, cells: Vec<f64>, atom: f64) -> Result<Self> {
        if cells.len() != grid.len() {
            return Err(Error::Config(format!("state has {} cells, grid has {}", cells.len(), grid.len())));
        }
        check_entries(&cells, atom)?;
        Ok(Self { grid, cells, atom })
    }

    /// Skips validation; the solver guarantees nonnegativity itself.
    pub(crate) fn from_parts(grid: Arc<Grid>, cells: Vec<f64>, atom: f64) -> Self {
        debug_assert_eq!(cells.len(), grid.len());
        Self { grid, cells, atom }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self { grid, cells: vec![0.0; n], atom: 0.0 }
    }

    pub fn atom_only(grid: Arc<Grid>, atom: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![0.0; n], atom)
    }

    /// Cell counts `∫_cell f_in` by 16-point Gauss-Legendre per cell.
    pub fn from_density<F: Fn(f64) -> f64>(f_in: F, grid: Arc<Grid>) -> Result<Self> {
        let rule = GaussLegendre::new(16);
        let mut cells = Vec::with_capacity(grid.len());
        for w in grid.edges().windows(2) {
            let mut acc = 0.0;
            for (x, wt) in rule.mapped(w[0], w[1]) {
                let v = f_in(x);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Domain(format!("initial density is {v} at x = {x}")));
                }
                acc += wt * v;
            }
            cells.push(acc);
        }
        let total: f64 = cells.iter().sum();
        if total > 0.0 && cells[0] > 0.5 * total {
            warn!(
                "first cell holds {:.1}% of the clusters; negative moments are poorly resolved",
                100.0 * cells[0] / total
            );
        }
        Ok(Self { grid, cells, atom: 0.0 })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [f64] {
        &mut self.cells
    }

    pub fn atom(&self) -> f64 {
        self.atom
    }

    pub fn set_atom(&mut self, a: f64) {
        self.atom = a;
    }

    pub fn is_valid(&self) -> bool {
        check_entries(&self.cells, self.atom).is_ok()
    }

    /// `m_λ = Σ c_i x_i^λ + a`.
    pub fn moment(&self, lambda: f64) -> f64 {
        self.interior_moment(lambda) + self.atom
    }

    /// Moment over the cells only.
    pub fn interior_moment(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return self.cells.iter().sum();
        }
        self.cells
            .iter()
            .zip(self.grid.pivots())
            .filter(|(c, _)| **c != 0.0)
            .map(|(c, x)| c * x.powf(lambda))
            .sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.cells.iter().sum::<f64>() + self.atom
    }

    /// `⟨μ, φ⟩ = Σ c_i φ(x_i) + a φ(1)`.
    pub fn pair_test(&self, phi: &TestFunction) -> f64 {
        self.cells.iter().zip(self.grid.pivots()).map(|(c, &x)| c * phi.eval(x)).sum::<f64>()
            + self.atom * phi.eval(1.0)
    }

    /// `c_i / Δx_i`.
    pub fn densities(&self) -> Vec<f64> {
        self.cells.iter().zip(self.grid.widths()).map(|(c, w)| c / w).collect()
    }

    /// Mass of the cells lying inside `(0, δ]`, the straddling cell counted in proportion.
    pub fn prefix_count(&self, delta: f64) -> f64 {
        let e = self.grid.edges();
        let mut acc = 0.0;
        for (i, c) in self.cells.iter().enumerate() {
            if e[i + 1] <= delta {
                acc += c;
            } else if e[i] < delta {
                acc += c * (delta - e[i]) / (e[i + 1] - e[i]);
            }
        }
        acc
    }

    /// `Σ |c_i − d_i| + |a − b|`.
    pub fn tv_distance(&self, other: &StateMeasure) -> f64 {
        self.cells.iter().zip(&other.cells).map(|(a, b)| (a - b).abs()).sum::<f64>() + (self.atom - other.atom).abs()
    }
}

/// Piecewise-linear member of `Lip_0(0, 1]`, extended by `φ(1)` beyond 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    breaks: Vec<f64>,
    values: Vec<f64>,
    lip: f64,
    sup: f64,
}

impl TestFunction {
    /// Breakpoints in `(0, 1]`, strictly increasing, ending at 1. `φ(0) = 0` is implied.
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != values.len() {
            return Err(Error::Config("test function needs matching, nonempty breakpoints and values".into()));
        }
        if breaks[0] <= 0.0 || breaks.windows(2).any(|w| w[0] >= w[1]) || *breaks.last().unwrap() != 1.0 {
            return Err(Error::Config("test function breakpoints must increase strictly within (0, 1] and end at 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("test function values must be finite".into()));
        }
        let mut lip: f64 = 0.0;
        let (mut xp, mut vp) = (0.0, 0.0);
        for (&b, &v) in breaks.iter().zip(&values) {
            lip = lip.max(((v - vp) / (b - xp)).abs());
            xp = b;
            vp = v;
        }
        let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { breaks, values, lip, sup })
    }

    pub fn identity() -> Self {
        Self::new(vec![1.0], vec![1.0]).expect("valid")
    }

    /// `min(x/ε, 1)`, approximating the indicator of `(0, 1]`.
    pub fn ramp(eps: f64) -> Self {
        if eps >= 1.0 {
            return Self::new(vec![1.0], vec![1.0 / eps]).expect("valid");
        }
        Self::new(vec![eps, 1.0], vec![1.0, 1.0]).expect("valid")
    }

    /// Interpolant of `f` on `m` uniform breakpoints.
    pub fn from_fn<F: Fn(f64) -> f64>(f: F, m: usize) -> Self {
        let m = m.max(1);
        let breaks: Vec<f64> = (1..=m).map(|k| if k == m { 1.0 } else { k as f64 / m as f64 }).collect();
        let values = breaks.iter().map(|&x| f(x)).collect();
        Self::new(breaks, values).expect("uniform breakpoints are valid")
    }

    /// Hat of height 1 centred at `c` with half-width `w`, clipped to `(0, 1]`.
    pub fn hat(c: f64, w: f64) -> Self {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (x, v) in [(c - w, 0.0), (c, 1.0), (c + w, 0.0)] {
            if x > 0.0 && x < 1.0 {
                pts.push((x, v));
            }
        }
        let at_one = (1.0 - (1.0 - c).abs() / w).max(0.0);
        pts.push((1.0, at_one));
        let (b, v) = pts.into_iter().unzip();
        Self::new(b, v).expect("hat breakpoints are valid")
    }

    /// Random breakpoints and values in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_breaks: usize) -> Self {
        let m = rng.random_range(1..=max_breaks.max(1));
        let mut breaks: Vec<f64> = (0..m - 1).map(|_| rng.random_range(1e-3..1.0)).collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        breaks.push(1.0);
        let values = breaks.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(breaks, values).expect("sorted random breakpoints are valid")
    }

    /// Ten smooth interpolants and ten hats.
    pub fn battery() -> Vec<TestFunction> {
        use std::f64::consts::PI;
        let smooth: [fn(f64) -> f64; 10] = [
            |x| x,
            |x| x * (1.0 - x),
            |x| x * x,
            |x| (0.5 * PI * x).sin(),
            |x| (PI * x).sin(),
            |x| 1.0 - (-3.0 * x).exp(),
            |x| x * x * x,
            |x| x * (1.0 - x) * (1.0 - x),
            |x| (2.0 * PI * x).sin(),
            |x| x * (1.0 - x).sqrt(),
        ];
        let mut out: Vec<TestFunction> = smooth.iter().map(|f| Self::from_fn(f, 64)).collect();
        for k in 1..=10 {
            out.push(Self::hat(k as f64 / 11.0, 1.0 / 11.0));
        }
        out
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[φ]_Lip`, exact.
    pub fn lipschitz(&self) -> f64 {
        self.lip
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup
    }

    /// `φ̄(x)`: zero at 0, constant beyond 1.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return *self.values.last().unwrap();
        }
        let k = self.breaks.partition_point(|&b| b < x);
        let (x0, v0) = if k == 0 { (0.0, 0.0) } else { (self.breaks[k - 1], self.values[k - 1]) };
        let (x1, v1) = (self.breaks[k], self.values[k]);
        v0 + (v1 - v0) * (x - x0) / (x1 - x0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.breaks.clone(), self.values.iter().map(|v| s * v).collect()).expect("scaling keeps validity")
    }
}

/// Totals of the right-hand-side pieces, as count rates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContributionTotals {
    pub coag_gain: f64,
    pub coag_overflow: f64,
    pub coag_loss: f64,
    pub boundary_sink: f64,
    pub frag_loss: f64,
    pub frag_gain: f64,
    pub source: f64,
    pub atom_sink: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    pub m_neg1: f64,
    pub m_neg_alpha: f64,
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub atom: f64,
    pub exited_mass: f64,
    pub entropy: Option<f64>,
    pub residual_phi1: Option<f64>,
    pub contributions: ContributionTotals,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub d3: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateMeasure>,
    pub diagnostics: Vec<DiagnosticsRecord>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, state: StateMeasure, diag: DiagnosticsRecord) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(Error::Domain(format!("snapshot time {t} does not follow {last}")));
            }
            if *self.states[0].grid() != *state.grid() {
                return Err(Error::Config("snapshot grid differs from the first snapshot".into()));
            }
        }
        self.times.push(t);
        self.states.push(state);
        self.diagnostics.push(diag);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(&f64, &StateMeasure)> {
        self.times.last().zip(self.states.last())
    }

    /// Index of the snapshot at time `t`, if there is one (tolerance 1e-12).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
    }

    /// `sup_k ‖μ_k − ν_k‖_TV` over snapshots at matching times.
    pub fn sup_tv_distance(&self, other: &Trajectory) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, s) in self.times.iter().zip(&self.states) {
            if let Some(j) = other.index_of(*t) {
                worst = worst.max(s.tv_distance(&other.states[j]));
            }
        }
        worst
    }
}
