//! Reference implementations: the truncated discrete coagulation-fragmentation
//! system and brute-force trapezoid quadrature.

use log::warn;

use crate::boundary::{eval_c, eval_g};
use crate::error::{Error, Result};
use crate::kernel::RateKernel;
use crate::operators::Model;

/// Species `1..=n` with masses `i·h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem {
    n: usize,
    h: f64,
    k: Vec<f64>,
    f: Vec<f64>,
    source: Vec<f64>,
    sink: Vec<f64>,
}

impl DiscreteSystem {
    /// A closed system with all rates zero.
    pub fn new(n: usize, h: f64) -> Result<Self> {
        if n == 0 || !(h > 0.0) {
            return Err(Error::Config("discrete system needs n ≥ 1 and h > 0".into()));
        }
        Ok(Self { n, h, k: vec![0.0; n * n], f: vec![0.0; n * n], source: vec![0.0; n], sink: vec![0.0; n] })
    }

    /// `K_ij = K(ih, jh)`, `F_ij = h F(ih, jh)`, `Q_i = h C(ih)`, `S_i = G(ih)` at `t = 0`.
    pub fn from_model(model: &Model, n: usize) -> Result<Self> {
        let h = 1.0 / n as f64;
        let mut sys = Self::new(n, h)?;
        for i in 1..=n {
            for j in 1..=n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                sys.set_k(i, j, model.coag.rate(x, y))?;
                sys.set_f(i, j, h * model.frag.rate(x, y))?;
            }
            let x = i as f64 * h;
            if !model.boundary.is_zero() {
                sys.source[i - 1] = h * eval_c(&model.frag, &model.boundary, 0.0, x)?;
                sys.sink[i - 1] = eval_g(model.sink_kernel(), &model.boundary, 0.0, x)?;
            }
        }
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        (i - 1) * self.n + (j - 1)
    }

    fn check(&self, i: usize, j: usize, v: f64) -> Result<()> {
        if i == 0 || j == 0 || i > self.n || j > self.n {
            return Err(Error::Config(format!("species index ({i}, {j}) outside 1..={}", self.n)));
        }
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("rates must be finite and nonnegative, got {v}")));
        }
        Ok(())
    }

    /// Sets `K_ij = K_ji`.
    pub fn set_k(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        self.check(i, j, v)?;
        let (a, b) = (self.idx(i, j), self.idx(j, i));
        self.k[a] = v;
        self.k[b] = v;
        Ok(())
    }

    /// Sets `F_ij = F_ji`, the rate at which `i + j` splits into `i` and `j`.
    pub fn set_f(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        self.check(i, j, v)?;
        let (a, b) = (self.idx(i, j), self.idx(j, i));
        self.f[a] = v;
        self.f[b] = v;
        Ok(())
    }

    pub fn set_source(&mut self, i: usize, v: f64) -> Result<()> {
        self.check(i, 1, v)?;
        self.source[i - 1] = v;
        Ok(())
    }

    /// Linear sink rate: species `i` is removed at `S_i c_i`.
    pub fn set_sink(&mut self, i: usize, v: f64) -> Result<()> {
        self.check(i, 1, v)?;
        self.sink[i - 1] = v;
        Ok(())
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        self.k[self.idx(i, j)]
    }

    pub fn f(&self, i: usize, j: usize) -> f64 {
        self.f[self.idx(i, j)]
    }

    /// `Σ (ih)^λ c_i`.
    pub fn moment(&self, c: &[f64], lambda: f64) -> f64 {
        c.iter().enumerate().map(|(i, ci)| ((i + 1) as f64 * self.h).powf(lambda) * ci).sum()
    }
}

/// Rates of the truncated discrete system; sums over partners start at 1.
pub fn discrete_rhs(c: &[f64], sys: &DiscreteSystem) -> Vec<f64> {
    let mut out = vec![0.0; sys.n];
    discrete_rhs_into(c, sys, &mut out);
    out
}

fn discrete_rhs_into(c: &[f64], sys: &DiscreteSystem, out: &mut [f64]) {
    let n = sys.n;
    for i in 1..=n {
        let ci = c[i - 1];
        let mut r = 0.0;
        for j in 1..i {
            r += 0.5 * sys.k(j, i - j) * c[j - 1] * c[i - j - 1];
            r -= 0.5 * sys.f(j, i - j) * ci;
        }
        for j in 1..=n {
            r -= sys.k(i, j) * ci * c[j - 1];
        }
        for j in 1..=(n - i) {
            r += sys.f(i, j) * c[i + j - 1];
        }
        out[i - 1] = r + sys.source[i - 1] - sys.sink[i - 1] * ci;
    }
}

/// Dense output of [`integrate_discrete`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Step size that passed the refinement check.
    pub dt: f64,
}

impl DiscreteTrajectory {
    /// State at `t`, linearly interpolated between steps.
    pub fn state_at(&self, t: f64) -> Option<Vec<f64>> {
        let last = *self.times.last()?;
        if t < 0.0 || t > last * (1.0 + 1e-12) {
            return None;
        }
        let k = self.times.partition_point(|&s| s < t);
        if k < self.times.len() && (self.times[k] - t).abs() <= 1e-12 * last.max(1.0) {
            return Some(self.states[k].clone());
        }
        if k == 0 || k >= self.times.len() {
            return self.states.last().cloned();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Some(self.states[k - 1].iter().zip(&self.states[k]).map(|(a, b)| a + w * (b - a)).collect())
    }
}

fn rk4(sys: &DiscreteSystem, c0: &[f64], t_final: f64, dt: f64) -> DiscreteTrajectory {
    let n = sys.n;
    let steps = (t_final / dt).ceil().max(1.0) as usize;
    let h = t_final / steps as f64;
    let mut c = c0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![c.clone()];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for s in 1..=steps {
        discrete_rhs_into(&c, sys, &mut k1);
        for i in 0..n {
            tmp[i] = c[i] + 0.5 * h * k1[i];
        }
        discrete_rhs_into(&tmp, sys, &mut k2);
        for i in 0..n {
            tmp[i] = c[i] + 0.5 * h * k2[i];
        }
        discrete_rhs_into(&tmp, sys, &mut k3);
        for i in 0..n {
            tmp[i] = c[i] + h * k3[i];
        }
        discrete_rhs_into(&tmp, sys, &mut k4);
        for i in 0..n {
            c[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        times.push(if s == steps { t_final } else { s as f64 * h });
        states.push(c.clone());
    }
    DiscreteTrajectory { times, states, dt: h }
}

/// Classic fourth-order Runge-Kutta, halving `dt` until two successive
/// refinements agree to `1e-8` at the final time.
pub fn integrate_discrete(sys: &DiscreteSystem, c0: &[f64], t_final: f64, dt: f64) -> Result<DiscreteTrajectory> {
    if c0.len() != sys.n {
        return Err(Error::Config(format!("initial vector has {} entries for {} species", c0.len(), sys.n)));
    }
    if !(t_final >= 0.0) || !(dt > 0.0) {
        return Err(Error::Config("integrate_discrete needs T ≥ 0 and dt > 0".into()));
    }
    if t_final == 0.0 {
        return Ok(DiscreteTrajectory { times: vec![0.0], states: vec![c0.to_vec()], dt });
    }
    let mut coarse = rk4(sys, c0, t_final, dt);
    let mut h = dt;
    for _ in 0..16 {
        h *= 0.5;
        let fine = rk4(sys, c0, t_final, h);
        let a = coarse.states.last().expect("nonempty");
        let b = fine.states.last().expect("nonempty");
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if diff.is_finite() && diff <= 1e-8 * scale {
            return Ok(fine);
        }
        coarse = fine;
    }
    Err(Error::Oracle(format!("RK4 refinements did not agree to 1e-8 down to dt = {h:e}")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadOracle {
    /// Composite trapezoid with `n` intervals.
    pub value: f64,
    /// Richardson extrapolation from `n/2` and `n`.
    pub extrapolated: f64,
    /// `(T_{n/4} − T_{n/2}) / (T_{n/2} − T_n)`, about 4 for smooth integrands.
    pub ratio: f64,
}

fn trapezoid<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

/// Composite trapezoid on `[a, b]` with `n` intervals and a Richardson check.
pub fn quad_oracle<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> Result<QuadOracle> {
    if n < 4 || n > 100_000_000 {
        return Err(Error::Config(format!("trapezoid count must lie in [4, 1e8], got {n}")));
    }
    if !(b > a) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Config(format!("invalid interval [{a}, {b}]")));
    }
    let n = n - n % 4;
    let t1 = trapezoid(&f, a, b, n);
    let t2 = trapezoid(&f, a, b, n / 2);
    let t4 = trapezoid(&f, a, b, n / 4);
    let d_fine = t2 - t1;
    let d_coarse = t4 - t2;
    let ratio = if d_fine != 0.0 { d_coarse / d_fine } else { f64::INFINITY };
    let negligible = d_coarse.abs() <= 1e-14 * t1.abs().max(1e-300);
    if !negligible && !(2.0..=8.0).contains(&ratio) {
        warn!("trapezoid Richardson ratio {ratio:.3} on [{a}, {b}] suggests a nonsmooth integrand");
    }
    Ok(QuadOracle { value: t1, extrapolated: t1 + (t1 - t2) / 3.0, ratio })
}

/// `∫₁^cutoff f` by [`quad_oracle`].
pub fn tail_oracle<F: Fn(f64) -> f64>(f: F, cutoff: f64, n: usize) -> Result<QuadOracle> {
    quad_oracle(f, 1.0, cutoff, n)
}
