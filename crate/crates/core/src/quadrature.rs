//! Gauss-Legendre rules and a globally adaptive Gauss-Kronrod (7/15) integrator.
//!
//! The adaptive driver bisects the subinterval with the largest local error
//! estimate until the summed estimate drops below `max(abs, rel * |I|)`.

use std::f64::consts::PI;

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = (n + 1) / 2;
        for i in 0..m {
            // Tricomi's initial guess, then Newton on P_n.
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&z, &w)| (mid + half * z, half * w))
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs: 1e-15, rel: 1e-10, max_intervals: 4000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

impl QuadResult {
    pub fn converged(&self, tol: &Tolerance) -> bool {
        self.error <= tol.abs.max(tol.rel * self.value.abs())
    }
}

pub fn adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> QuadResult {
    if a == b {
        return QuadResult { value: 0.0, error: 0.0, intervals: 0 };
    }
    let (v, e) = gk15(&f, a, b);
    let mut parts = vec![(a, b, v, e)];
    let mut value = v;
    let mut error = e;
    while error > tol.abs.max(tol.rel * value.abs()) && parts.len() < tol.max_intervals {
        let (worst, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty partition");
        let (lo, hi, pv, pe) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval cannot be split further in floating point.
            parts.push((lo, hi, pv, 0.0));
            error -= pe;
            continue;
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        value += v1 + v2 - pv;
        error += e1 + e2 - pe;
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
    // Re-sum to shed the drift of the running updates.
    let value = parts.iter().map(|p| p.2).sum();
    let error = parts.iter().map(|p| p.3).sum();
    QuadResult { value, error, intervals: parts.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [1usize, 2, 5, 8, 16, 33] {
            let rule = GaussLegendre::new(n);
            assert_relative_eq!(rule.weights().iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            for deg in 0..(2 * n) {
                let exact = if deg % 2 == 0 { 2.0 / (deg as f64 + 1.0) } else { 0.0 };
                let got = rule.integrate(|x| x.powi(deg as i32), -1.0, 1.0);
                assert!((got - exact).abs() < 1e-12, "n={n} deg={deg}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let rule = GaussLegendre::new(16);
        for w in rule.nodes().windows(2) {
            assert!(w[0] < w[1]);
        }
        for (a, b) in rule.nodes().iter().zip(rule.nodes().iter().rev()) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn kronrod_rule_integrates_degree_22() {
        let (v, _) = gk15(&|x: f64| x.powi(22), 0.0, 1.0);
        assert_relative_eq!(v, 1.0 / 23.0, max_relative = 1e-13);
        let (w, _) = gk15(&|_| 1.0, -1.0, 1.0);
        assert_relative_eq!(w, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = adaptive(|x: f64| x.powf(-0.5), 0.0, 1.0, Tolerance::default());
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-9);
        let r = adaptive(|x: f64| (-x).exp(), 1.0, 50.0, Tolerance::default());
        assert_relative_eq!(r.value, (-1.0f64).exp() - (-50.0f64).exp(), max_relative = 1e-12);
    }
}
