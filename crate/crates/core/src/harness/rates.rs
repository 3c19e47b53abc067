//! Rate shapes `σ_n`, `ω_n` and the admissible growth of `d`.

use serde::Serialize;

use crate::error::{Error, Result};

fn check(n: f64, p: f64, d: f64, qbar0: f64) -> Result<()> {
    if !(n > 0.0 && p > 0.0 && d > 0.0) {
        return Err(Error::arg("n, p and d must be positive"));
    }
    if d > p {
        return Err(Error::arg(format!("d = {d} exceeds p = {p}")));
    }
    if !(qbar0 >= 0.0 && qbar0.is_finite()) {
        return Err(Error::arg("qbar0 must be nonnegative"));
    }
    Ok(())
}

/// `p d^{3+q̄₀/2} / n^{5/2} + p d² / n^{3/2} + p d^{q̄₀+2} / n^{(q̄₀+3)/2}`.
pub fn sigma_n(n: f64, p: f64, d: f64, qbar0: f64) -> Result<f64> {
    check(n, p, d, qbar0)?;
    Ok(p * d.powf(3.0 + 0.5 * qbar0) / n.powf(2.5)
        + p * d * d / n.powf(1.5)
        + p * d.powf(qbar0 + 2.0) / n.powf(0.5 * (qbar0 + 3.0)))
}

/// `n^{-(q₀q₁+3)/2} σ_n`.
pub fn omega_n(n: f64, p: f64, d: f64, qbar0: f64, q0: f64, q1: f64) -> Result<f64> {
    Ok(n.powf(-0.5 * (q0 * q1 + 3.0)) * sigma_n(n, p, d, qbar0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdmissibleD {
    /// `1/4 - (q̄₀+3)α/2`
    pub exponent: f64,
    /// `6 + (2q̄₀+6)κ`
    pub log_power: f64,
    /// `n^exponent / ln(n)^log_power`, the order `d` must stay below.
    pub scale: f64,
}

pub fn admissible_d(n: f64, alpha: f64, kappa: f64, qbar0: f64) -> Result<AdmissibleD> {
    if !(qbar0 >= 0.0 && qbar0.is_finite()) {
        return Err(Error::arg("qbar0 must be nonnegative"));
    }
    let alpha_max = 1.0 / (2.0 * qbar0 + 6.0);
    if !(alpha >= 0.0 && alpha <= alpha_max) {
        return Err(Error::arg(format!("alpha must lie in [0, {alpha_max}], got {alpha}")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::arg("kappa must be nonnegative"));
    }
    if !(n > 1.0) {
        return Err(Error::arg("n must exceed 1"));
    }
    let exponent = 0.25 - 0.5 * (qbar0 + 3.0) * alpha;
    let log_power = 6.0 + (2.0 * qbar0 + 6.0) * kappa;
    Ok(AdmissibleD { exponent, log_power, scale: n.powf(exponent) / n.ln().powf(log_power) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub n: f64,
    pub p: f64,
    pub d: f64,
    pub qbar0: f64,
    pub q0: f64,
    pub q1: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub sigma_n: f64,
    pub omega_n: f64,
    pub d_exponent: f64,
    pub log_power: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn rate_report(n: f64, p: f64, d: f64, qbar0: f64, q0: f64, q1: f64, alpha: f64, kappa: f64) -> Result<RateReport> {
    let s = sigma_n(n, p, d, qbar0)?;
    let a = admissible_d(n, alpha, kappa, qbar0)?;
    Ok(RateReport {
        n,
        p,
        d,
        qbar0,
        q0,
        q1,
        alpha,
        kappa,
        sigma_n: s,
        omega_n: omega_n(n, p, d, qbar0, q0, q1)?,
        d_exponent: a.exponent,
        log_power: a.log_power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let s = sigma_n(100.0, 100.0, 1.0, 0.0).unwrap();
        assert!((s - 0.201).abs() < 1e-15);
        let a = admissible_d(1e4, 0.0, 0.0, 0.0).unwrap();
        assert_eq!((a.exponent, a.log_power), (0.25, 6.0));
        let a = admissible_d(1e4, 1.0 / 14.0, 0.0, 4.0).unwrap();
        assert!(a.exponent.abs() < 1e-15);
        assert_eq!(admissible_d(1e4, 0.0, 1.0, 0.0).unwrap().log_power, 12.0);
        assert!(admissible_d(1e4, 0.2, 0.0, 0.0).is_err());
    }

    #[test]
    fn doubling_d() {
        let t = |d: f64| {
            let (n, p): (f64, f64) = (1e3, 500.0);
            [p * d.powi(3) / n.powf(2.5), p * d * d / n.powf(1.5), p * d * d / n.powf(1.5)]
        };
        let (a, b) = (t(2.0), t(4.0));
        assert_eq!(b[0] / a[0], 8.0);
        assert_eq!(b[1] / a[1], 4.0);
        let s = sigma_n(1e3, 500.0, 2.0, 0.0).unwrap();
        assert!((s - a.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn omega_relation() {
        let s = sigma_n(400.0, 200.0, 2.0, 4.0).unwrap();
        let w = omega_n(400.0, 200.0, 2.0, 4.0, 2.0, 0.5).unwrap();
        assert!((w - s * 400f64.powf(-2.0)).abs() <= 1e-15 * s);
        assert!(sigma_n(10.0, 2.0, 3.0, 0.0).is_err());
    }
}
