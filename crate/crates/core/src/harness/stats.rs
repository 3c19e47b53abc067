//! Two-sample distances and resampling standard errors.

use serde::Serialize;

use crate::error::{Error, Result};

/// Two-sample Kolmogorov–Smirnov statistic by a sorted merge.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("ks_statistic needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::arg("ks_statistic received NaN"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic two-sample critical value at level `alpha`.
pub fn ks_critical(alpha: f64, na: usize, nb: usize) -> f64 {
    let (n, m) = (na as f64, nb as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Leave-one-out jackknife of a statistic of `n` units: `stat(None)` on all
/// units, `stat(Some(r))` without unit `r`. Returns `(estimate, se)`.
pub fn jackknife(n: usize, stat: impl Fn(Option<usize>) -> f64) -> (f64, f64) {
    let full = stat(None);
    if n < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = (0..n).map(|r| stat(Some(r))).collect();
    let m = mean(&loo);
    let nf = n as f64;
    let var = (nf - 1.0) / nf * loo.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (full, var.sqrt())
}

fn without(x: &[f64], skip: Option<usize>) -> Vec<f64> {
    x.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| *v).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapStat {
    pub x_arm: f64,
    pub g_arm: f64,
    /// `x_arm - g_arm`
    pub gap: f64,
    pub standard_error: f64,
}

impl GapStat {
    pub fn within_se(&self, k: f64) -> bool {
        self.gap.abs() <= k * self.standard_error
    }
}

/// Gap of `stat` between paired samples, jackknifed over pairs.
pub fn paired_gap(x: &[f64], g: &[f64], stat: impl Fn(&[f64]) -> f64) -> Result<GapStat> {
    if x.len() != g.len() || x.len() < 2 {
        return Err(Error::arg("paired_gap needs equal samples of size >= 2"));
    }
    let (gap, se) = jackknife(x.len(), |skip| stat(&without(x, skip)) - stat(&without(g, skip)));
    Ok(GapStat { x_arm: stat(x), g_arm: stat(g), gap, standard_error: se })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap(), 0.25);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_with_ties_and_unequal_sizes() {
        let d = ks_statistic(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0, 2.0]).unwrap();
        assert!((d - (2.0 / 3.0 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn jackknife_of_mean_is_classical_se() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let (m, se) = jackknife(x.len(), |s| mean(&without(&x, s)));
        assert_eq!(m, 4.0);
        assert!((se - (variance(&x) / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn critical_value() {
        let c = ks_critical(0.01, 200, 200);
        assert!((c - 1.6276 * 0.1).abs() < 1e-3);
    }
}
