//! Positive profiles `Q` on `(0, ∞)` used to build detailed-balance pairs.

use std::fmt;
use std::sync::Arc;

pub type ProfileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `A x^{-p} e^{-q x}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerExp {
    pub amplitude: f64,
    pub power: f64,
    pub decay: f64,
}

impl PowerExp {
    pub fn exponential(amplitude: f64, decay: f64) -> Self {
        Self { amplitude, power: 0.0, decay }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let mut v = self.amplitude * (-self.decay * x).exp();
        if self.power != 0.0 {
            v *= x.powf(-self.power);
        }
        v
    }
}

#[derive(Clone)]
pub enum Profile {
    PowerExp(PowerExp),
    Custom(ProfileFn),
}

impl Profile {
    pub fn exponential(amplitude: f64, decay: f64) -> Self {
        Profile::PowerExp(PowerExp::exponential(amplitude, decay))
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Profile::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::PowerExp(p) => p.eval(x),
            Profile::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::PowerExp(p) => f.debug_tuple("PowerExp").field(p).finish(),
            Profile::Custom(_) => f.write_str("Custom(<fn>)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_exp_matches_formula() {
        let q = Profile::PowerExp(PowerExp { amplitude: 2.0, power: -1.0, decay: 1.0 });
        let x: f64 = 0.7;
        assert!((q.eval(x) - 2.0 * x * (-x).exp()).abs() < 1e-15);
        assert_eq!(Profile::exponential(0.0, 1.0).eval(3.0), 0.0);
    }
}
