//! Coagulation and fragmentation kernels.
//!
//! Every evaluator sorts its arguments before computing, so `K(x, y)` and
//! `K(y, x)` are bit-identical even for tabulated or user-supplied kernels.

use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::profile::Profile;

pub type KernelFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Anything that can be evaluated as a rate `(x, y) -> r`.
pub trait RateKernel: Send + Sync {
    fn rate(&self, x: f64, y: f64) -> f64;
}

#[inline]
fn canonical(x: f64, y: f64) -> (f64, f64) {
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

fn check_sizes(x: f64, y: f64) -> Result<()> {
    if !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite() {
        return Err(Error::Domain(format!("kernel arguments must be positive and finite, got ({x}, {y})")));
    }
    Ok(())
}

/// Declared constants of `K ≤ K0 (x^-α + y^-α)(x^β + y^β)` and, optionally,
/// `K ≥ K1 (x^-α y^β + y^-α x^β)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoagBounds {
    pub k0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k1: Option<f64>,
}

impl CoagBounds {
    pub fn upper(&self, x: f64, y: f64) -> f64 {
        self.k0 * (x.powf(-self.alpha) + y.powf(-self.alpha)) * (x.powf(self.beta) + y.powf(self.beta))
    }

    pub fn lower(&self, x: f64, y: f64) -> Option<f64> {
        self.k1.map(|k1| {
            k1 * (x.powf(-self.alpha) * y.powf(self.beta) + y.powf(-self.alpha) * x.powf(self.beta))
        })
    }
}

/// `F ≤ F0 (x^γ + y^γ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FragBounds {
    pub f0: f64,
    pub gamma: f64,
}

impl FragBounds {
    pub fn upper(&self, x: f64, y: f64) -> f64 {
        self.f0 * (x.powf(self.gamma) + y.powf(self.gamma))
    }
}

/// Rectangular grid of kernel values with bilinear interpolation.
/// Outside the grid the nearest edge value is used.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTable {
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
}

impl KernelTable {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || ys.len() < 2 {
            return Err(Error::Config("kernel table needs at least two nodes per axis".into()));
        }
        if values.len() != xs.len() * ys.len() {
            return Err(Error::Config(format!(
                "kernel table has {} values, expected {}x{}",
                values.len(),
                xs.len(),
                ys.len()
            )));
        }
        for axis in [&xs, &ys] {
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("kernel table axes must be strictly increasing".into()));
            }
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("kernel table values must be finite and nonnegative".into()));
        }
        Ok(Self { xs, ys, values })
    }

    /// Reads `(x, y, value)` triples with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut triples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Parse(format!("kernel table row has {} fields, expected 3", rec.len())));
            }
            let mut v = [0.0; 3];
            for (k, field) in rec.iter().enumerate() {
                v[k] = field
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("kernel table entry {field:?}: {e}")))?;
            }
            triples.push(v);
        }
        let mut xs: Vec<f64> = triples.iter().map(|t| t[0]).collect();
        let mut ys: Vec<f64> = triples.iter().map(|t| t[1]).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let mut values = vec![f64::NAN; xs.len() * ys.len()];
        for t in &triples {
            let i = xs.binary_search_by(|p| p.total_cmp(&t[0])).expect("x node present");
            let j = ys.binary_search_by(|p| p.total_cmp(&t[1])).expect("y node present");
            values[i * ys.len() + j] = t[2];
        }
        if values.iter().any(|v| v.is_nan()) || triples.len() != values.len() {
            return Err(Error::Parse("kernel table is not a complete rectangular grid".into()));
        }
        Self::new(xs, ys, values)
    }

    fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
        if v <= axis[0] {
            return (0, 0.0);
        }
        let last = axis.len() - 1;
        if v >= axis[last] {
            return (last - 1, 1.0);
        }
        let i = axis.partition_point(|&a| a <= v) - 1;
        (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
    }

    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let (i, s) = Self::bracket(&self.xs, x);
        let (j, u) = Self::bracket(&self.ys, y);
        let ny = self.ys.len();
        let v00 = self.values[i * ny + j];
        let v01 = self.values[i * ny + j + 1];
        let v10 = self.values[(i + 1) * ny + j];
        let v11 = self.values[(i + 1) * ny + j + 1];
        (1.0 - s) * ((1.0 - u) * v00 + u * v01) + s * ((1.0 - u) * v10 + u * v11)
    }
}

#[derive(Clone)]
pub enum CoagFamily {
    Constant(f64),
    /// `s (x + y)`
    Additive(f64),
    /// `s x y`
    Multiplicative(f64),
    /// `K0 (x^-α + y^-α)(x^β + y^β)`
    BoundForm { k0: f64, alpha: f64, beta: f64 },
    /// `K1 (x^-α y^β + y^-α x^β)`
    LowerForm { k1: f64, alpha: f64, beta: f64 },
    Tabulated(Arc<KernelTable>),
    Custom(KernelFn),
}

impl fmt::Debug for CoagFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoagFamily::Constant(c) => write!(f, "Constant({c})"),
            CoagFamily::Additive(s) => write!(f, "Additive({s})"),
            CoagFamily::Multiplicative(s) => write!(f, "Multiplicative({s})"),
            CoagFamily::BoundForm { k0, alpha, beta } => {
                write!(f, "BoundForm {{ k0: {k0}, alpha: {alpha}, beta: {beta} }}")
            }
            CoagFamily::LowerForm { k1, alpha, beta } => {
                write!(f, "LowerForm {{ k1: {k1}, alpha: {alpha}, beta: {beta} }}")
            }
            CoagFamily::Tabulated(_) => f.write_str("Tabulated"),
            CoagFamily::Custom(_) => f.write_str("Custom(<fn>)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoagKernel {
    family: CoagFamily,
    bounds: Option<CoagBounds>,
}

impl CoagKernel {
    fn with_family(family: CoagFamily) -> Self {
        let bounds = implied_coag_bounds(&family);
        Self { family, bounds }
    }

    pub fn constant(c: f64) -> Self {
        Self::with_family(CoagFamily::Constant(c))
    }

    pub fn additive(s: f64) -> Self {
        Self::with_family(CoagFamily::Additive(s))
    }

    pub fn multiplicative(s: f64) -> Self {
        Self::with_family(CoagFamily::Multiplicative(s))
    }

    pub fn bound_form(k0: f64, alpha: f64, beta: f64) -> Self {
        Self::with_family(CoagFamily::BoundForm { k0, alpha, beta })
    }

    pub fn lower_form(k1: f64, alpha: f64, beta: f64) -> Self {
        Self::with_family(CoagFamily::LowerForm { k1, alpha, beta })
    }

    pub fn tabulated(table: KernelTable) -> Self {
        Self::with_family(CoagFamily::Tabulated(Arc::new(table)))
    }

    pub fn custom(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::with_family(CoagFamily::Custom(Arc::new(f)))
    }

    /// Replaces the declared bound constants.
    pub fn with_bounds(mut self, bounds: CoagBounds) -> Result<Self> {
        if !(bounds.k0 >= 0.0) || !(0.0..=1.0).contains(&bounds.alpha) || !(0.0..=1.0).contains(&bounds.beta) {
            return Err(Error::Config(format!("invalid coagulation bounds {bounds:?}")));
        }
        if let Some(k1) = bounds.k1 {
            if !(k1 >= 0.0) {
                return Err(Error::Config(format!("K1 must be nonnegative, got {k1}")));
            }
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn family(&self) -> &CoagFamily {
        &self.family
    }

    pub fn bounds(&self) -> Option<CoagBounds> {
        self.bounds
    }

    /// True when the family blows up at the origin.
    pub fn is_singular(&self) -> bool {
        match &self.family {
            CoagFamily::BoundForm { k0, alpha, .. } => *alpha > 0.0 && *k0 > 0.0,
            CoagFamily::LowerForm { k1, alpha, .. } => *alpha > 0.0 && *k1 > 0.0,
            CoagFamily::Custom(_) => self.bounds.is_some_and(|b| b.alpha > 0.0),
            _ => false,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        check_sizes(x, y)?;
        Ok(self.rate(x, y))
    }

    pub fn truncate(&self, j: u32) -> Result<TruncatedKernel> {
        TruncatedKernel::new(self.clone(), j)
    }
}

fn implied_coag_bounds(family: &CoagFamily) -> Option<CoagBounds> {
    match *family {
        CoagFamily::Constant(c) => Some(CoagBounds { k0: c / 4.0, alpha: 0.0, beta: 0.0, k1: Some(c / 2.0) }),
        CoagFamily::Additive(s) => Some(CoagBounds { k0: s / 2.0, alpha: 0.0, beta: 1.0, k1: Some(s) }),
        CoagFamily::Multiplicative(s) => Some(CoagBounds { k0: s / 2.0, alpha: 0.0, beta: 1.0, k1: None }),
        CoagFamily::BoundForm { k0, alpha, beta } => Some(CoagBounds { k0, alpha, beta, k1: Some(k0) }),
        CoagFamily::LowerForm { k1, alpha, beta } => Some(CoagBounds { k0: k1, alpha, beta, k1: Some(k1) }),
        CoagFamily::Tabulated(_) | CoagFamily::Custom(_) => None,
    }
}

impl RateKernel for CoagKernel {
    #[inline]
    fn rate(&self, x: f64, y: f64) -> f64 {
        let (x, y) = canonical(x, y);
        match &self.family {
            CoagFamily::Constant(c) => *c,
            CoagFamily::Additive(s) => s * (x + y),
            CoagFamily::Multiplicative(s) => s * x * y,
            CoagFamily::BoundForm { k0, alpha, beta } => {
                k0 * (x.powf(-alpha) + y.powf(-alpha)) * (x.powf(*beta) + y.powf(*beta))
            }
            CoagFamily::LowerForm { k1, alpha, beta } => {
                k1 * (x.powf(-alpha) * y.powf(*beta) + y.powf(-alpha) * x.powf(*beta))
            }
            CoagFamily::Tabulated(t) => t.interpolate(x, y),
            CoagFamily::Custom(f) => f(x, y),
        }
    }
}

/// `K_j = K · 1{x > 1/j, y > 1/j}`.
#[derive(Clone, Debug)]
pub struct TruncatedKernel {
    base: CoagKernel,
    j: u32,
    cutoff: f64,
}

impl TruncatedKernel {
    pub fn new(base: CoagKernel, j: u32) -> Result<Self> {
        if j < 1 {
            return Err(Error::Config("truncation index j must be at least 1".into()));
        }
        Ok(Self { base, j, cutoff: 1.0 / j as f64 })
    }

    pub fn base(&self) -> &CoagKernel {
        &self.base
    }

    pub fn j(&self) -> u32 {
        self.j
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        check_sizes(x, y)?;
        Ok(self.rate(x, y))
    }
}

impl RateKernel for TruncatedKernel {
    #[inline]
    fn rate(&self, x: f64, y: f64) -> f64 {
        if x > self.cutoff && y > self.cutoff {
            self.base.rate(x, y)
        } else {
            0.0
        }
    }
}

/// The coagulation kernel a run actually uses.
#[derive(Clone, Debug)]
pub enum CoagModel {
    Full(CoagKernel),
    Truncated(TruncatedKernel),
}

impl CoagModel {
    pub fn base(&self) -> &CoagKernel {
        match self {
            CoagModel::Full(k) => k,
            CoagModel::Truncated(t) => t.base(),
        }
    }

    pub fn cutoff(&self) -> Option<f64> {
        match self {
            CoagModel::Full(_) => None,
            CoagModel::Truncated(t) => Some(t.cutoff()),
        }
    }

    pub fn truncation(&self) -> Option<u32> {
        match self {
            CoagModel::Full(_) => None,
            CoagModel::Truncated(t) => Some(t.j()),
        }
    }

    pub fn bounds(&self) -> Option<CoagBounds> {
        self.base().bounds()
    }
}

impl From<CoagKernel> for CoagModel {
    fn from(k: CoagKernel) -> Self {
        CoagModel::Full(k)
    }
}

impl From<TruncatedKernel> for CoagModel {
    fn from(k: TruncatedKernel) -> Self {
        CoagModel::Truncated(k)
    }
}

impl RateKernel for CoagModel {
    #[inline]
    fn rate(&self, x: f64, y: f64) -> f64 {
        match self {
            CoagModel::Full(k) => k.rate(x, y),
            CoagModel::Truncated(k) => k.rate(x, y),
        }
    }
}

#[derive(Clone)]
pub enum FragFamily {
    Zero,
    Constant(f64),
    /// `f0 (x^γ + y^γ)`
    Power { f0: f64, gamma: f64 },
    /// `s x y`
    Multiplicative(f64),
    Tabulated(Arc<KernelTable>),
    /// `K(x,y) Q(x) Q(y) / Q(x+y)`
    DetailedBalance { coag: CoagKernel, profile: Profile },
    Custom(KernelFn),
}

impl fmt::Debug for FragFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FragFamily::Zero => f.write_str("Zero"),
            FragFamily::Constant(c) => write!(f, "Constant({c})"),
            FragFamily::Power { f0, gamma } => write!(f, "Power {{ f0: {f0}, gamma: {gamma} }}"),
            FragFamily::Multiplicative(s) => write!(f, "Multiplicative({s})"),
            FragFamily::Tabulated(_) => f.write_str("Tabulated"),
            FragFamily::DetailedBalance { coag, profile } => f
                .debug_struct("DetailedBalance")
                .field("coag", coag.family())
                .field("profile", profile)
                .finish(),
            FragFamily::Custom(_) => f.write_str("Custom(<fn>)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FragKernel {
    family: FragFamily,
    bounds: Option<FragBounds>,
}

impl FragKernel {
    fn with_family(family: FragFamily) -> Self {
        let bounds = implied_frag_bounds(&family);
        Self { family, bounds }
    }

    pub fn zero() -> Self {
        Self::with_family(FragFamily::Zero)
    }

    pub fn constant(c: f64) -> Self {
        Self::with_family(FragFamily::Constant(c))
    }

    pub fn power(f0: f64, gamma: f64) -> Self {
        Self::with_family(FragFamily::Power { f0, gamma })
    }

    pub fn multiplicative(s: f64) -> Self {
        Self::with_family(FragFamily::Multiplicative(s))
    }

    pub fn tabulated(table: KernelTable) -> Self {
        Self::with_family(FragFamily::Tabulated(Arc::new(table)))
    }

    pub fn custom(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::with_family(FragFamily::Custom(Arc::new(f)))
    }

    /// Builds `F = K Q(x) Q(y) / Q(x+y)`.
    ///
    /// `Q` is probed on a log lattice of `(0, 2·ymax]`; a nonpositive or
    /// non-finite sample is rejected.
    pub fn detailed_balance(coag: &CoagKernel, profile: Profile) -> Result<Self> {
        let probes = log_lattice(1e-8, 100.0, 400);
        for &x in &probes {
            let q = profile.eval(x);
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::SingularProfile(format!("Q({x}) = {q} is not positive")));
            }
        }
        Ok(Self::with_family(FragFamily::DetailedBalance { coag: coag.clone(), profile }))
    }

    pub fn with_bounds(mut self, bounds: FragBounds) -> Result<Self> {
        if !(bounds.f0 >= 0.0) || !(0.0..=1.0).contains(&bounds.gamma) {
            return Err(Error::Config(format!("invalid fragmentation bounds {bounds:?}")));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn family(&self) -> &FragFamily {
        &self.family
    }

    pub fn bounds(&self) -> Option<FragBounds> {
        self.bounds
    }

    pub fn is_zero(&self) -> bool {
        match &self.family {
            FragFamily::Zero => true,
            FragFamily::Constant(c) => *c == 0.0,
            FragFamily::Power { f0, .. } => *f0 == 0.0,
            FragFamily::Multiplicative(s) => *s == 0.0,
            _ => false,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        check_sizes(x, y)?;
        if let FragFamily::DetailedBalance { profile, .. } = &self.family {
            let q = profile.eval(x + y);
            if !(q > 0.0) {
                return Err(Error::SingularProfile(format!("Q({}) = {q}", x + y)));
            }
        }
        Ok(self.rate(x, y))
    }
}

fn implied_frag_bounds(family: &FragFamily) -> Option<FragBounds> {
    match family {
        FragFamily::Zero => Some(FragBounds { f0: 0.0, gamma: 0.0 }),
        FragFamily::Constant(c) => Some(FragBounds { f0: c / 2.0, gamma: 0.0 }),
        FragFamily::Power { f0, gamma } => Some(FragBounds { f0: *f0, gamma: *gamma }),
        FragFamily::Multiplicative(s) => Some(FragBounds { f0: s / 2.0, gamma: 1.0 }),
        FragFamily::DetailedBalance { coag, profile: Profile::PowerExp(q) } if q.power == 0.0 => {
            let a = q.amplitude;
            match coag.family() {
                CoagFamily::Constant(c) => Some(FragBounds { f0: a * c / 2.0, gamma: 0.0 }),
                CoagFamily::Additive(s) => Some(FragBounds { f0: a * s, gamma: 1.0 }),
                CoagFamily::Multiplicative(s) => Some(FragBounds { f0: a * s / 2.0, gamma: 1.0 }),
                _ => None,
            }
        }
        _ => None,
    }
}

impl RateKernel for FragKernel {
    #[inline]
    fn rate(&self, x: f64, y: f64) -> f64 {
        let (x, y) = canonical(x, y);
        match &self.family {
            FragFamily::Zero => 0.0,
            FragFamily::Constant(c) => *c,
            FragFamily::Power { f0, gamma } => f0 * (x.powf(*gamma) + y.powf(*gamma)),
            FragFamily::Multiplicative(s) => s * x * y,
            FragFamily::Tabulated(t) => t.interpolate(x, y),
            FragFamily::DetailedBalance { coag, profile } => {
                let k = coag.rate(x, y);
                match profile {
                    // Exponential factors cancel exactly.
                    Profile::PowerExp(q) => {
                        let mut v = k * q.amplitude;
                        if q.power != 0.0 {
                            v *= (x * y / (x + y)).powf(-q.power);
                        }
                        v
                    }
                    Profile::Custom(q) => {
                        let d = q(x + y);
                        if d > 0.0 {
                            k * q(x) * q(y) / d
                        } else {
                            0.0
                        }
                    }
                }
            }
            FragFamily::Custom(f) => f(x, y),
        }
    }
}

/// `n` points spaced geometrically from `lo` to `hi`, both included.
pub(crate) fn log_lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                (a + (b - a) * k as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    /// `max (K − bound)/bound`, clamped at 0.
    pub max_violation: f64,
    pub worst_point: (f64, f64),
    /// Same for the lower bound, when one is declared.
    pub lower_violation: Option<f64>,
    pub lower_worst_point: Option<(f64, f64)>,
    pub samples: usize,
}

/// Lattice plus seeded random points in `(0, 1]²`.
fn bound_samples(n_samples: usize, seed: u64) -> Vec<(f64, f64)> {
    let lattice = log_lattice(1e-6, 1.0, 64);
    let mut pts = Vec::with_capacity(64 * 64 + n_samples);
    for &x in &lattice {
        for &y in &lattice {
            pts.push((x, y));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_samples {
        let (x, y) = if k % 2 == 0 {
            (1.0 - rng.random::<f64>(), 1.0 - rng.random::<f64>())
        } else {
            let ex: f64 = rng.random_range(-6.0..0.0);
            let ey: f64 = rng.random_range(-6.0..0.0);
            (10f64.powf(ex), 10f64.powf(ey))
        };
        pts.push((x, y));
    }
    pts
}

fn scan<U, V>(pts: &[(f64, f64)], violation: U, value: V) -> (f64, (f64, f64))
where
    U: Fn(f64, f64, f64) -> f64,
    V: Fn(f64, f64) -> f64,
{
    let mut worst = 0.0;
    let mut at = pts.first().copied().unwrap_or((1.0, 1.0));
    for &(x, y) in pts {
        let v = violation(x, y, value(x, y));
        if v > worst || v.is_nan() {
            worst = if v.is_nan() { f64::INFINITY } else { v };
            at = (x, y);
        }
    }
    (worst, at)
}

pub fn validate_coag_bounds(k: &CoagKernel, n_samples: usize, seed: u64) -> Result<BoundReport> {
    let b = k
        .bounds()
        .ok_or_else(|| Error::Config("coagulation kernel has no declared bound parameters".into()))?;
    let pts = bound_samples(n_samples, seed);
    let (max_violation, worst_point) = scan(
        &pts,
        |x, y, kv| {
            let ub = b.upper(x, y);
            ((kv - ub) / ub).max(0.0)
        },
        |x, y| k.rate(x, y),
    );
    let (lower_violation, lower_worst_point) = if b.k1.is_some() {
        let (v, p) = scan(
            &pts,
            |x, y, kv| {
                let lb = b.lower(x, y).unwrap_or(0.0);
                if lb > 0.0 {
                    ((lb - kv) / lb).max(0.0)
                } else {
                    0.0
                }
            },
            |x, y| k.rate(x, y),
        );
        (Some(v), Some(p))
    } else {
        (None, None)
    };
    Ok(BoundReport { max_violation, worst_point, lower_violation, lower_worst_point, samples: pts.len() })
}

pub fn validate_frag_bounds(f: &FragKernel, n_samples: usize, seed: u64) -> Result<BoundReport> {
    let b = f
        .bounds()
        .ok_or_else(|| Error::Config("fragmentation kernel has no declared bound parameters".into()))?;
    let pts = bound_samples(n_samples, seed);
    let (max_violation, worst_point) = scan(
        &pts,
        |x, y, fv| {
            let ub = b.upper(x, y);
            if ub > 0.0 {
                ((fv - ub) / ub).max(0.0)
            } else if fv > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        },
        |x, y| f.rate(x, y),
    );
    Ok(BoundReport { max_violation, worst_point, lower_violation: None, lower_worst_point: None, samples: pts.len() })
}

/// `K∞ = sup_{(0,1]²} K` and the tail constant `Kβ` with `K(x,y) ≤ Kβ y^β` for `y > 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundedKernelParams {
    pub k_inf: f64,
    pub k_beta: f64,
    pub beta: f64,
}

/// Sampled estimate, exact for kernels that are monotone on the sampling box.
///
/// A truncated kernel is sampled on the closed box `[1/j, 1]²`, which gives
/// the supremum over `(1/j, 1]²` for continuous bases.
pub fn bounded_params(k: &CoagModel, beta: f64) -> Result<BoundedKernelParams> {
    let base = k.base();
    let lo = match k.cutoff() {
        Some(c) => c,
        None => {
            if base.is_singular() {
                return Err(Error::Unbounded(format!(
                    "{:?} is singular at the origin; truncate it first",
                    base.family()
                )));
            }
            1e-9
        }
    };
    let xs = log_lattice(lo, 1.0, 257);
    let mut k_inf: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        for &y in &xs[i..] {
            k_inf = k_inf.max(base.rate(x, y));
        }
    }
    if k.cutoff().is_none() {
        // Custom kernels without declared bounds: compare against a coarser box.
        let coarse = log_lattice(1e-3, 1.0, 64);
        let mut k_coarse: f64 = 0.0;
        for &x in &coarse {
            for &y in &coarse {
                k_coarse = k_coarse.max(base.rate(x, y));
            }
        }
        if !k_inf.is_finite() || k_inf > 1e3 * k_coarse.max(1e-300) {
            return Err(Error::Unbounded(format!("sampled sup {k_inf:e} grows without bound near 0")));
        }
    }
    let ys = log_lattice(1.0, 1e4, 200);
    let mut k_beta: f64 = 0.0;
    for &x in &xs {
        for &y in &ys {
            k_beta = k_beta.max(base.rate(x, y) / y.powf(beta));
        }
    }
    if !k_inf.is_finite() || !k_beta.is_finite() {
        return Err(Error::Unbounded("sampled kernel values are not finite".into()));
    }
    Ok(BoundedKernelParams { k_inf, k_beta, beta })
}
