//! Large-cluster boundary datum `g(t, y)` on `(1, ∞)` and its coupling integrals
//! `G(t, x) = ∫ K(x, y) g dy` and `C(t, x) = ∫ F(y − x, x) g dy`.

use std::io::Read;

use log::warn;
use statrs::function::gamma::checked_gamma_ui;

use crate::error::{Error, Result};
use crate::kernel::RateKernel;
use crate::profile::PowerExp;
use crate::quadrature::{adaptive, Tolerance};
use crate::state::Grid;

/// Multiplicative time dependence of the datum.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeModulation {
    Constant,
    /// `c / (1 + t)`
    Decaying { c: f64 },
    /// Piecewise-linear through `(t, factor)` samples, constant outside.
    Sampled(Vec<(f64, f64)>),
}

impl TimeModulation {
    pub fn sampled(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("sampled modulation needs at least one point".into()));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("sampled modulation times must be strictly increasing".into()));
        }
        if points.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite() && p.0.is_finite())) {
            return Err(Error::Config("sampled modulation factors must be finite and nonnegative".into()));
        }
        Ok(TimeModulation::Sampled(points))
    }

    /// Reads `(t, factor)` rows with a header.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut pts = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                let s = rec.get(k).ok_or_else(|| Error::Parse("modulation row needs two fields".into()))?;
                s.parse().map_err(|e| Error::Parse(format!("modulation entry {s:?}: {e}")))
            };
            pts.push((parse(0)?, parse(1)?));
        }
        Self::sampled(pts)
    }

    pub fn factor(&self, t: f64) -> f64 {
        match self {
            TimeModulation::Constant => 1.0,
            TimeModulation::Decaying { c } => c / (1.0 + t),
            TimeModulation::Sampled(pts) => {
                let k = pts.partition_point(|p| p.0 <= t);
                if k == 0 {
                    pts[0].1
                } else if k == pts.len() {
                    pts[k - 1].1
                } else {
                    let (t0, f0) = pts[k - 1];
                    let (t1, f1) = pts[k];
                    f0 + (f1 - f0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    /// `sup_{t ≥ 0}` of the factor.
    pub fn sup(&self) -> f64 {
        match self {
            TimeModulation::Constant => 1.0,
            TimeModulation::Decaying { c } => *c,
            TimeModulation::Sampled(pts) => pts.iter().map(|p| p.1).fold(0.0, f64::max),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeModulation::Constant)
    }
}

const TAIL_TOL: f64 = 1e-13;

/// `g(t, y) = m(t) · A y^{-p} e^{-q y}` for `y > 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryDatum {
    spatial: PowerExp,
    modulation: TimeModulation,
    cutoff: f64,
}

impl BoundaryDatum {
    pub fn new(spatial: PowerExp, modulation: TimeModulation) -> Result<Self> {
        let PowerExp { amplitude, power, decay } = spatial;
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::Config(format!("boundary amplitude must be finite and nonnegative, got {amplitude}")));
        }
        if !(decay >= 0.0 && decay.is_finite()) || !power.is_finite() {
            return Err(Error::Config(format!("invalid boundary profile {spatial:?}")));
        }
        if amplitude > 0.0 && decay == 0.0 && power <= 1.0 {
            return Err(Error::Config(format!("power tail y^-{power} is not integrable on (1, ∞)")));
        }
        if let TimeModulation::Decaying { c } = modulation {
            if !(c >= 0.0) {
                return Err(Error::Config(format!("modulation constant must be nonnegative, got {c}")));
            }
        }
        Ok(Self { spatial, modulation, cutoff: 50.0 })
    }

    pub fn exponential(amplitude: f64, decay: f64) -> Result<Self> {
        Self::new(PowerExp { amplitude, power: 0.0, decay }, TimeModulation::Constant)
    }

    pub fn power_tail(amplitude: f64, power: f64) -> Result<Self> {
        Self::new(PowerExp { amplitude, power, decay: 0.0 }, TimeModulation::Constant)
    }

    pub fn power_exp(amplitude: f64, power: f64, decay: f64) -> Result<Self> {
        Self::new(PowerExp { amplitude, power, decay }, TimeModulation::Constant)
    }

    pub fn zero() -> Self {
        Self {
            spatial: PowerExp { amplitude: 0.0, power: 0.0, decay: 0.0 },
            modulation: TimeModulation::Constant,
            cutoff: 50.0,
        }
    }

    pub fn with_modulation(mut self, modulation: TimeModulation) -> Self {
        self.modulation = modulation;
        self
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Result<Self> {
        if !(cutoff > 1.0) {
            return Err(Error::Config(format!("tail cutoff must exceed 1, got {cutoff}")));
        }
        self.cutoff = cutoff;
        Ok(self)
    }

    pub fn spatial(&self) -> PowerExp {
        self.spatial
    }

    pub fn modulation(&self) -> &TimeModulation {
        &self.modulation
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn is_zero(&self) -> bool {
        self.spatial.amplitude == 0.0 || self.modulation.sup() == 0.0
    }

    pub fn eval(&self, t: f64, y: f64) -> f64 {
        self.modulation.factor(t) * self.spatial.eval(y)
    }

    /// `M_λ` at unit modulation.
    pub fn base_moment(&self, lambda: f64) -> Result<f64> {
        let PowerExp { amplitude: a, power: p, decay: q } = self.spatial;
        if a == 0.0 {
            return Ok(0.0);
        }
        if q == 0.0 {
            if p <= lambda + 1.0 {
                return Err(Error::Config(format!("moment of order {lambda} diverges for the tail y^-{p}")));
            }
            return Ok(a / (p - lambda - 1.0));
        }
        // ∫_1^∞ y^{s-1} e^{-qy} dy = q^{-s} Γ(s, q)
        let s = lambda - p + 1.0;
        if s > 0.0 && s.fract() == 0.0 && s <= 40.0 {
            let n = s as usize;
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..n {
                term *= q / k as f64;
                sum += term;
            }
            // (n-1)! e^{-q} Σ q^k/k! scaled by q^{-n}
            let mut fact = 1.0;
            for k in 1..n {
                fact *= k as f64;
            }
            return Ok(a * fact * (-q).exp() * sum / q.powi(n as i32));
        }
        if s > 0.0 {
            if let Ok(g) = checked_gamma_ui(s, q) {
                if g.is_finite() {
                    return Ok(a * g / q.powf(s));
                }
            }
        }
        self.tail_integral(|y| y.powf(lambda), lambda.max(0.0))
    }

    pub fn moment(&self, lambda: f64, t: f64) -> Result<f64> {
        Ok(self.modulation.factor(t) * self.base_moment(lambda)?)
    }

    /// `M̄_λ = sup_t M_λ(t)`.
    pub fn moment_bound(&self, lambda: f64) -> Result<f64> {
        Ok(self.modulation.sup() * self.base_moment(lambda)?)
    }

    /// Errors when `M_λ` is infinite.
    pub fn require_moment(&self, lambda: f64) -> Result<()> {
        self.base_moment(lambda).map(|_| ())
    }

    /// `∫_1^∞ h(y) A y^{-p} e^{-qy} dy` where `h` grows at most like `y^growth`.
    pub fn tail_integral<H: Fn(f64) -> f64>(&self, h: H, growth: f64) -> Result<f64> {
        let s = self.spatial;
        if s.amplitude == 0.0 {
            return Ok(0.0);
        }
        // Tolerances scale with the amplitude so results are exactly linear in it.
        let tol = Tolerance { abs: 1e-15 * s.amplitude, rel: 1e-10, max_intervals: 2000 };
        if s.decay == 0.0 {
            // y = 1/u maps (1, ∞) onto (0, 1).
            let r = adaptive(
                |u: f64| {
                    let y = 1.0 / u;
                    h(y) * s.amplitude * u.powf(s.power - 2.0)
                },
                0.0,
                1.0,
                tol,
            );
            if !r.converged(&tol) || !r.value.is_finite() {
                return Err(Error::Config(format!(
                    "tail integral against y^-{} does not converge (error estimate {:e})",
                    s.power, r.error
                )));
            }
            return Ok(r.value);
        }
        let m = growth - s.power;
        let tail_bound = |y: f64| {
            let denom = s.decay - m.max(0.0) / y;
            if denom <= 0.0 {
                f64::INFINITY
            } else {
                h(y).abs().max(y.powf(growth)) * s.eval(y) / denom
            }
        };
        let mut ymax = self.cutoff;
        while tail_bound(ymax) > TAIL_TOL * s.amplitude {
            ymax += 10.0 / s.decay;
            if ymax > 1e7 {
                return Err(Error::Config("boundary tail does not decay fast enough".into()));
            }
        }
        let r = adaptive(|y: f64| h(y) * s.eval(y), 1.0, ymax, tol);
        if !r.converged(&tol) {
            warn!("tail quadrature reached {} intervals with error {:e}", r.intervals, r.error);
        }
        Ok(r.value)
    }

    fn check_size(x: f64) -> Result<()> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(Error::Domain(format!("size {x} is outside (0, 1]")));
        }
        Ok(())
    }

    /// `G` at unit modulation.
    pub fn base_g<K: RateKernel + ?Sized>(&self, k: &K, x: f64) -> Result<f64> {
        Self::check_size(x)?;
        self.tail_integral(|y| k.rate(x, y), 1.0)
    }

    /// `C` at unit modulation.
    pub fn base_c<F: RateKernel + ?Sized>(&self, f: &F, x: f64) -> Result<f64> {
        Self::check_size(x)?;
        self.tail_integral(|y| f.rate(y - x, x), 1.0)
    }
}

/// `G(t, x) = ∫_1^∞ K(x, y) g(t, y) dy`.
pub fn eval_g<K: RateKernel + ?Sized>(k: &K, g: &BoundaryDatum, t: f64, x: f64) -> Result<f64> {
    Ok(g.modulation.factor(t) * g.base_g(k, x)?)
}

/// `C(t, x) = ∫_1^∞ F(y − x, x) g(t, y) dy`.
pub fn eval_c<F: RateKernel + ?Sized>(f: &F, g: &BoundaryDatum, t: f64, x: f64) -> Result<f64> {
    Ok(g.modulation.factor(t) * g.base_c(f, x)?)
}

/// `G` and `C` at the pivots of a grid, at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotTables {
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    /// `G(t, 1)`, used by the optional sink on the endpoint atom.
    pub g_atom: f64,
}

/// Unit-modulation tables; the time dependence is a scalar factor.
#[derive(Clone, Debug)]
pub struct BoundaryTables {
    base: PivotTables,
    modulation: TimeModulation,
}

impl BoundaryTables {
    pub fn new<K, F>(k: &K, f: &F, g: &BoundaryDatum, grid: &Grid) -> Result<Self>
    where
        K: RateKernel + ?Sized,
        F: RateKernel + ?Sized,
    {
        let n = grid.len();
        let mut gv = vec![0.0; n];
        let mut cv = vec![0.0; n];
        let mut g_atom = 0.0;
        if !g.is_zero() {
            for (i, &x) in grid.pivots().iter().enumerate() {
                gv[i] = g.base_g(k, x)?;
                cv[i] = g.base_c(f, x)?;
            }
            g_atom = g.base_g(k, 1.0)?;
        }
        Ok(Self { base: PivotTables { g: gv, c: cv, g_atom }, modulation: g.modulation.clone() })
    }

    pub fn base(&self) -> &PivotTables {
        &self.base
    }

    pub fn factor(&self, t: f64) -> f64 {
        self.modulation.factor(t)
    }

    pub fn is_constant(&self) -> bool {
        self.modulation.is_constant()
    }

    pub fn at(&self, t: f64) -> PivotTables {
        if self.modulation.is_constant() {
            return self.base.clone();
        }
        let m = self.modulation.factor(t);
        PivotTables {
            g: self.base.g.iter().map(|v| m * v).collect(),
            c: self.base.c.iter().map(|v| m * v).collect(),
            g_atom: m * self.base.g_atom,
        }
    }
}

/// Tables at time `t`.
pub fn precompute_tables<K, F>(k: &K, f: &F, g: &BoundaryDatum, grid: &Grid, t: f64) -> Result<PivotTables>
where
    K: RateKernel + ?Sized,
    F: RateKernel + ?Sized,
{
    Ok(BoundaryTables::new(k, f, g, grid)?.at(t))
}
