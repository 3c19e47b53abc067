//! Squared, absolute and Huber losses on the residual, their C³ smoothings,
//! Moreau proximal operators and growth/smoothness profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `r²`
    Squared,
    /// `|r|`
    Absolute,
    /// `r²/2` for `|r| <= eta`, `eta |r| - eta²/2` beyond.
    Huber { eta: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Huber { eta } if !(eta > 0.0 && eta.is_finite()) => {
                Err(Error::spec(format!("huber eta must be positive, got {eta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Absolute => "absolute",
            LossKind::Huber { .. } => "huber",
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, LossKind::Absolute)
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            LossKind::Squared => r * r,
            LossKind::Absolute => r.abs(),
            LossKind::Huber { eta } => {
                let a = r.abs();
                if a <= eta {
                    0.5 * r * r
                } else {
                    eta * a - 0.5 * eta * eta
                }
            }
        }
    }

    /// Weak derivative; `0` at the kink of the absolute loss.
    pub fn derivative(&self, r: f64) -> f64 {
        match *self {
            LossKind::Squared => 2.0 * r,
            LossKind::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Huber { eta } => r.clamp(-eta, eta),
        }
    }

    /// Lipschitz constant of the derivative, when it exists.
    pub fn derivative_lipschitz(&self) -> Option<f64> {
        match self {
            LossKind::Squared => Some(2.0),
            LossKind::Absolute => None,
            LossKind::Huber { .. } => Some(1.0),
        }
    }

    /// C³ approximation with smoothing parameter `rho ∈ (0, 1)`.
    pub fn smoothing(&self, rho: f64) -> Result<SmoothedLoss> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::arg(format!("smoothing parameter must lie in (0, 1), got {rho}")));
        }
        self.validate()?;
        Ok(SmoothedLoss { kind: *self, rho })
    }

    /// `argmin_z (x - z)² / (2 lambda) + loss(z)`.
    pub fn prox(&self, x: f64, lambda: f64) -> Result<f64> {
        check_step(lambda)?;
        Ok(self.prox_unchecked(x, lambda))
    }

    pub(crate) fn prox_unchecked(&self, x: f64, lambda: f64) -> f64 {
        match *self {
            LossKind::Squared => x / (1.0 + 2.0 * lambda),
            LossKind::Absolute => x.signum() * (x.abs() - lambda).max(0.0),
            LossKind::Huber { eta } => {
                if x.abs() <= eta * (1.0 + lambda) {
                    x / (1.0 + lambda)
                } else {
                    x - lambda * eta * x.signum()
                }
            }
        }
    }

    /// Derivative of the prox in `x`. At a kink the value from the inner
    /// side is returned and `at_kink` is set.
    pub fn prox_derivative(&self, x: f64, lambda: f64) -> Result<ProxDerivative> {
        check_step(lambda)?;
        let a = x.abs();
        Ok(match *self {
            LossKind::Squared => ProxDerivative {
                value: 1.0 / (1.0 + 2.0 * lambda),
                at_kink: false,
            },
            LossKind::Absolute => ProxDerivative {
                value: if a > lambda { 1.0 } else { 0.0 },
                at_kink: a == lambda,
            },
            LossKind::Huber { eta } => {
                let t = eta * (1.0 + lambda);
                ProxDerivative {
                    value: if a > t { 1.0 } else { 1.0 / (1.0 + lambda) },
                    at_kink: a == t,
                }
            }
        })
    }

    pub fn profile(&self) -> LossProfile {
        match self {
            LossKind::Squared => LossProfile::new(2.0, 0.5, 0.0, 0.0, None, SmoothingError::Zero, DerivativeGrowth::Constant),
            LossKind::Absolute => LossProfile::new(1.0, 0.0, 0.0, 0.0, None, SmoothingError::AtMostRho, DerivativeGrowth::InverseRhoSquared),
            LossKind::Huber { .. } => LossProfile::new(1.0, 0.0, 0.0, 0.0, Some(3.0), SmoothingError::AtMostRho, DerivativeGrowth::InverseRhoSquared),
        }
    }
}

fn check_step(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("prox step must be positive, got {lambda}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxDerivative {
    pub value: f64,
    pub at_kink: bool,
}

/// Value and first three derivatives at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothedLoss {
    kind: LossKind,
    rho: f64,
}

impl SmoothedLoss {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn value(&self, r: f64) -> f64 {
        self.jet(r).value
    }

    pub fn derivative(&self, r: f64) -> f64 {
        self.jet(r).d1
    }

    /// Supremum of the second derivative.
    pub fn derivative_lipschitz(&self) -> f64 {
        match self.kind {
            LossKind::Squared => 2.0,
            LossKind::Absolute => 1.875 / (0.5 * self.rho),
            LossKind::Huber { .. } => 1.0,
        }
    }

    pub fn jet(&self, r: f64) -> Jet {
        match self.kind {
            LossKind::Squared => Jet { value: r * r, d1: 2.0 * r, d2: 2.0, d3: 0.0 },
            LossKind::Absolute => abs_jet(r, 0.5 * self.rho),
            LossKind::Huber { eta } => huber_jet(r, eta, (0.5 * self.rho).min(0.5 * eta)),
        }
    }
}

/// `|r|` blended on `[-h, h]` by `h q(r/h)` with
/// `q(s) = (5 + 15 s² - 5 s⁴ + s⁶) / 16`, which matches `|r|` to third order
/// at `±h` and has `q'' = (15/8) (1 - s²)² >= 0`.
fn abs_jet(r: f64, h: f64) -> Jet {
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    let a = r.abs();
    if a >= h {
        return Jet { value: a, d1: sign, d2: 0.0, d3: 0.0 };
    }
    let s = r / h;
    let s2 = s * s;
    Jet {
        value: h * (5.0 + s2 * (15.0 + s2 * (-5.0 + s2))) / 16.0,
        d1: s * (30.0 + s2 * (-20.0 + 6.0 * s2)) / 16.0,
        d2: 30.0 * (1.0 - s2) * (1.0 - s2) / (16.0 * h),
        d3: 120.0 * s * (s2 - 1.0) / (16.0 * h * h),
    }
}

/// Huber with its second derivative ramped down by a smoothstep across
/// `[eta - h, eta + h]`; the linear branch ends up `h²/10` below the exact one.
fn huber_jet(r: f64, eta: f64, h: f64) -> Jet {
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    let a = r.abs();
    let lo = eta - h;
    let (value, d1, d2, d3) = if a <= lo {
        (0.5 * a * a, a, 1.0, 0.0)
    } else if a >= eta + h {
        (eta * a - 0.5 * eta * eta - 0.1 * h * h, eta, 0.0, 0.0)
    } else {
        let t = (a - lo) / (2.0 * h);
        let t2 = t * t;
        let value = 0.5 * lo * lo
            + 2.0 * h * lo * t
            + 4.0 * h * h * (0.5 * t2 - 0.25 * t2 * t2 + 0.1 * t2 * t2 * t);
        let d1 = lo + 2.0 * h * (t - t2 * t + 0.5 * t2 * t2);
        let d2 = 1.0 - (3.0 * t2 - 2.0 * t2 * t);
        let d3 = -(6.0 * t - 6.0 * t2) / (2.0 * h);
        (value, d1, d2, d3)
    };
    Jet { value, d1: sign * d1, d2, d3: sign * d3 }
}

/// Shape of `ρ ↦ M_ℓ(ρ)`, the sup-norm smoothing error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingError {
    Zero,
    AtMostRho,
}

/// Shape of `ρ ↦ D_ℓ(ρ)`, the derivative growth constant (unit constant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeGrowth {
    Constant,
    InverseRhoSquared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    /// `max{3 q1, q1 + q2, q3}`.
    pub q_bold: f64,
    /// `2 ⌈q0 q_bold / 2⌉`; this is the value the rate calculators use.
    pub qbar0: u32,
    /// Tabulated value when the published table disagrees with the formula.
    pub qbar0_tabulated: Option<f64>,
    pub qbar0_inconsistent: bool,
    pub smoothing_error: SmoothingError,
    pub derivative_growth: DerivativeGrowth,
}

impl LossProfile {
    fn new(
        q0: f64,
        q1: f64,
        q2: f64,
        q3: f64,
        tabulated: Option<f64>,
        smoothing_error: SmoothingError,
        derivative_growth: DerivativeGrowth,
    ) -> Self {
        let q_bold = (3.0 * q1).max(q1 + q2).max(q3);
        let qbar0 = 2 * (q0 * q_bold / 2.0).ceil() as u32;
        LossProfile {
            q0,
            q1,
            q2,
            q3,
            q_bold,
            qbar0,
            qbar0_tabulated: tabulated,
            qbar0_inconsistent: tabulated.is_some_and(|t| t != qbar0 as f64),
            smoothing_error,
            derivative_growth,
        }
    }

    /// Moment order `2^{(q̄₀ + 4)/2}` the covariates must possess.
    pub fn moment_order(&self) -> f64 {
        2f64.powf((self.qbar0 as f64 + 4.0) / 2.0)
    }

    pub fn smoothing_error_bound(&self, rho: f64) -> f64 {
        match self.smoothing_error {
            SmoothingError::Zero => 0.0,
            SmoothingError::AtMostRho => rho,
        }
    }

    pub fn derivative_growth_bound(&self, rho: f64) -> f64 {
        match self.derivative_growth {
            DerivativeGrowth::Constant => 1.0,
            DerivativeGrowth::InverseRhoSquared => rho.powi(-2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HUBER: LossKind = LossKind::Huber { eta: 1.0 };

    #[test]
    fn loss_values() {
        assert_eq!(LossKind::Squared.value(0.0), 0.0);
        assert_eq!(LossKind::Absolute.value(-3.0), 3.0);
        assert_eq!(HUBER.value(2.0), 1.5);
        assert_eq!(HUBER.value(-0.5), 0.125);
    }

    #[test]
    fn huber_is_continuous_at_threshold() {
        let eta = 0.7;
        let h = LossKind::Huber { eta };
        assert!((h.value(eta - 1e-12) - h.value(eta + 1e-12)).abs() < 1e-11);
    }

    #[test]
    fn prox_closed_forms() {
        assert_eq!(LossKind::Absolute.prox(3.0, 1.0).unwrap(), 2.0);
        assert_eq!(LossKind::Absolute.prox(0.5, 1.0).unwrap(), 0.0);
        assert_eq!(HUBER.prox(0.5, 1.0).unwrap(), 0.25);
        assert_eq!(HUBER.prox(-5.0, 1.0).unwrap(), -4.0);
        assert!((LossKind::Squared.prox(3.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(LossKind::Squared.prox(1.0, 0.0).is_err());
        assert!(LossKind::Absolute.prox(1.0, -1.0).is_err());
    }

    #[test]
    fn prox_derivative_values_and_kinks() {
        assert_eq!(LossKind::Absolute.prox_derivative(5.0, 1.0).unwrap().value, 1.0);
        assert_eq!(LossKind::Absolute.prox_derivative(0.2, 1.0).unwrap().value, 0.0);
        assert_eq!(LossKind::Squared.prox_derivative(7.0, 0.5).unwrap().value, 0.5);
        let kink = LossKind::Absolute.prox_derivative(-1.0, 1.0).unwrap();
        assert!(kink.at_kink);
        assert_eq!(kink.value, 0.0);
        let kink = HUBER.prox_derivative(2.0, 1.0).unwrap();
        assert!(kink.at_kink);
        assert_eq!(kink.value, 0.5);
    }

    #[test]
    fn smoothing_examples() {
        let sq = LossKind::Squared.smoothing(0.3).unwrap();
        assert!((sq.value(1.3) - 1.69).abs() < 1e-15);
        let abs = LossKind::Absolute.smoothing(0.1).unwrap();
        assert_eq!(abs.value(3.0), 3.0);
        let mut worst: f64 = 0.0;
        for i in 0..=100_000 {
            let r = -5.0 + 10.0 * i as f64 / 100_000.0;
            worst = worst.max((abs.value(r) - r.abs()).abs());
        }
        assert!(worst <= 0.1);
        assert!((worst - 5.0 * 0.1 / 32.0).abs() < 1e-12);
        assert!(LossKind::Absolute.smoothing(0.0).is_err());
        assert!(LossKind::Absolute.smoothing(1.0).is_err());
    }

    #[test]
    fn smoothed_jets_are_continuous_at_zone_edges() {
        let cases = [
            (LossKind::Absolute.smoothing(0.2).unwrap(), 0.1),
            (HUBER.smoothing(0.2).unwrap(), 0.9),
            (HUBER.smoothing(0.2).unwrap(), 1.1),
        ];
        for (loss, edge) in cases {
            for sign in [-1.0, 1.0] {
                let a = loss.jet(sign * (edge - 1e-9));
                let b = loss.jet(sign * (edge + 1e-9));
                assert!((a.value - b.value).abs() < 1e-8);
                assert!((a.d1 - b.d1).abs() < 1e-7);
                assert!((a.d2 - b.d2).abs() < 1e-6);
                assert!((a.d3 - b.d3).abs() < 1e-4, "{:?} {:?}", a, b);
            }
        }
    }

    #[test]
    fn smoothed_derivatives_match_finite_differences() {
        let h = 1e-6;
        for loss in [LossKind::Absolute.smoothing(0.3).unwrap(), HUBER.smoothing(0.4).unwrap()] {
            for i in 0..200 {
                let r = -1.5 + 3.0 * i as f64 / 199.0;
                let j = loss.jet(r);
                let fd1 = (loss.value(r + h) - loss.value(r - h)) / (2.0 * h);
                let fd2 = (loss.jet(r + h).d1 - loss.jet(r - h).d1) / (2.0 * h);
                let fd3 = (loss.jet(r + h).d2 - loss.jet(r - h).d2) / (2.0 * h);
                assert!((j.d1 - fd1).abs() < 1e-6);
                assert!((j.d2 - fd2).abs() < 1e-5);
                assert!((j.d3 - fd3).abs() < 1e-3 * (1.0 + j.d3.abs()));
            }
        }
    }

    #[test]
    fn profiles() {
        let sq = LossKind::Squared.profile();
        assert_eq!(sq.q_bold, 1.5);
        assert_eq!(sq.qbar0, 4);
        assert_eq!(sq.moment_order(), 16.0);
        let abs = LossKind::Absolute.profile();
        assert_eq!((abs.q0, abs.q_bold, abs.qbar0), (1.0, 0.0, 0));
        let hub = HUBER.profile();
        assert_eq!(hub.qbar0_tabulated, Some(3.0));
        assert!(hub.qbar0_inconsistent);
        assert_eq!(hub.qbar0, 0);
        assert_eq!(abs.derivative_growth_bound(0.5), 4.0);
        assert_eq!(sq.smoothing_error_bound(0.5), 0.0);
    }

    #[test]
    fn json_form() {
        let json = serde_json::to_string(&HUBER).unwrap();
        assert_eq!(json, r#"{"kind":"huber","eta":1.0}"#);
        let sq: LossKind = serde_json::from_str(r#"{"kind":"squared"}"#).unwrap();
        assert_eq!(sq, LossKind::Squared);
    }
}
