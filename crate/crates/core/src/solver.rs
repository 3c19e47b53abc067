//! Regression data synthesis and minimization of the ridge-penalized
//! empirical risk
//!
//! ```text
//! H(w) = (1/n) Σ_i loss((X w)_i - ξ_i) + (μ/2) ‖w + θ₀‖²
//! ```
//!
//! where `w = θ - θ₀` and `μ` is the ridge coefficient after applying the
//! [`PenaltyScale`]. Smooth losses use monotone FISTA with restarts; the
//! absolute loss uses ADMM on the split `u = X w - ξ`, with a smoothing
//! homotopy available as a cross-check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::design::DesignSampler;
use crate::error::{Error, Result};
use crate::losses::{LossKind, SmoothedLoss};
use crate::rng::{self, Purpose};

/// How `lambda` enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// `(λ/2) ‖w + θ₀‖²`.
    #[default]
    Plain,
    /// `(λ/(2n)) ‖w + θ₀‖²`, the scaling under which the ridge term and the
    /// averaged loss are of the same order when `X_i ~ N(0, Σ/n)`.
    SampleNormalized,
}

impl PenaltyScale {
    pub fn coefficient(&self, lambda: f64, n: usize) -> f64 {
        match self {
            PenaltyScale::Plain => lambda,
            PenaltyScale::SampleNormalized => lambda / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Theta0Spec {
    Explicit { values: Vec<f64> },
    Gaussian { variance: f64 },
    /// `±a` with probability 1/2 each.
    TwoPoint { a: f64 },
}

impl Theta0Spec {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            Theta0Spec::Explicit { values } if values.len() != p => Err(Error::spec(format!(
                "explicit theta0 has {} entries, expected {p}",
                values.len()
            ))),
            Theta0Spec::Gaussian { variance } if !(*variance >= 0.0) => {
                Err(Error::spec("theta0 variance must be nonnegative"))
            }
            _ => Ok(()),
        }
    }

    /// `E Π₀²` (empirical mean of squares for explicit vectors).
    pub fn second_moment(&self) -> f64 {
        match self {
            Theta0Spec::Explicit { values } => {
                values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64
            }
            Theta0Spec::Gaussian { variance } => *variance,
            Theta0Spec::TwoPoint { a } => a * a,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, p: usize, rng: &mut R) -> DVector<f64> {
        match self {
            Theta0Spec::Explicit { values } => DVector::from_column_slice(values),
            Theta0Spec::Gaussian { variance } => {
                let sd = variance.sqrt();
                DVector::from_fn(p, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
            }
            Theta0Spec::TwoPoint { a } => {
                DVector::from_fn(p, |_, _| if rng.random::<bool>() { *a } else { -*a })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian { variance: f64 },
    /// Unscaled Student-t with `nu` degrees of freedom.
    StudentT { nu: f64 },
    TwoPoint { a: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { variance } if !(variance >= 0.0) => {
                Err(Error::spec("noise variance must be nonnegative"))
            }
            NoiseSpec::StudentT { nu } if !(nu > 2.0) => {
                Err(Error::spec("student_t noise needs nu > 2 for a finite variance"))
            }
            _ => Ok(()),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            NoiseSpec::Gaussian { variance } => variance,
            NoiseSpec::StudentT { nu } => nu / (nu - 2.0),
            NoiseSpec::TwoPoint { a } => a * a,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseSpec::Gaussian { variance } => variance.sqrt() * rng.sample::<f64, _>(StandardNormal),
            NoiseSpec::StudentT { nu } => StudentT::new(nu).expect("validated nu").sample(rng),
            NoiseSpec::TwoPoint { a } => {
                if rng.random::<bool>() {
                    a
                } else {
                    -a
                }
            }
        }
    }
}

/// One draw of the linear model `Y = X θ₀ + ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta0: DVector<f64>,
    pub xi: DVector<f64>,
}

impl RegressionData {
    pub fn new(x: DMatrix<f64>, theta0: DVector<f64>, xi: DVector<f64>) -> Result<Self> {
        if x.ncols() != theta0.len() || x.nrows() != xi.len() {
            return Err(Error::arg("design, theta0 and noise shapes disagree"));
        }
        let y = &x * &theta0 + &xi;
        Ok(RegressionData { x, y, theta0, xi })
    }

    /// Same `θ₀` and `ξ` with another design.
    pub fn with_design(&self, x: DMatrix<f64>) -> Result<Self> {
        Self::new(x, self.theta0.clone(), self.xi.clone())
    }
}

/// Draws `(X, θ₀, ξ)` for one replication from independent streams.
pub fn synth_data(
    sampler: &DesignSampler,
    theta0: &Theta0Spec,
    noise: &NoiseSpec,
    seed: u64,
    replication: u64,
) -> Result<RegressionData> {
    let spec = sampler.spec();
    theta0.validate(spec.p)?;
    noise.validate()?;
    let x = sampler.sample(&mut rng::stream(seed, replication, Purpose::Design));
    let theta = theta0.draw(spec.p, &mut rng::stream(seed, replication, Purpose::Theta0));
    let mut noise_rng = rng::stream(seed, replication, Purpose::Noise);
    let xi = DVector::from_fn(spec.n, |_, _| noise.draw(&mut noise_rng));
    RegressionData::new(x, theta, xi)
}

#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub data: RegressionData,
    pub lambda: f64,
    pub loss: LossKind,
    pub penalty: PenaltyScale,
    /// `‖w‖∞ <= bound` when present.
    pub bound: Option<f64>,
}

impl ProblemInstance {
    pub fn new(data: RegressionData, lambda: f64, loss: LossKind) -> Self {
        ProblemInstance {
            data,
            lambda,
            loss,
            penalty: PenaltyScale::Plain,
            bound: None,
        }
    }

    pub fn with_penalty(mut self, penalty: PenaltyScale) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn n(&self) -> usize {
        self.data.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.data.x.ncols()
    }

    /// Effective ridge coefficient `μ`.
    pub fn ridge(&self) -> f64 {
        self.penalty.coefficient(self.lambda, self.n())
    }

    fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg("lambda must be nonnegative"));
        }
        if self.lambda == 0.0 && !matches!(self.loss, LossKind::Squared) {
            return Err(Error::arg("absolute and huber losses need lambda > 0"));
        }
        if let Some(b) = self.bound {
            if !(b >= 1.0) {
                return Err(Error::arg("box bound must be at least 1"));
            }
        }
        Ok(())
    }

    fn residuals(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.data.x * w - &self.data.xi
    }

    fn ridge_value(&self, w: &DVector<f64>) -> f64 {
        0.5 * self.ridge() * (w + &self.data.theta0).norm_squared()
    }
}

/// `H(w)` for the instance's loss.
pub fn objective(instance: &ProblemInstance, w: &DVector<f64>) -> f64 {
    let r = instance.residuals(w);
    mean_loss(&r, |v| instance.loss.value(v)) + instance.ridge_value(w)
}

fn mean_loss(r: &DVector<f64>, f: impl Fn(f64) -> f64) -> f64 {
    r.iter().map(|&v| f(v)).sum::<f64>() / r.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-8, max_iter: 50_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fista,
    Admm,
    SmoothingHomotopy,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Solution {
    pub w_hat: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
    /// Objective after each iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl Solution {
    /// `θ̂ = ŵ + θ₀`.
    pub fn theta_hat(&self, instance: &ProblemInstance) -> DVector<f64> {
        &self.w_hat + &instance.data.theta0
    }
}

/// Minimizes `H` (over the box when one is set).
///
/// The certificate in [`Solution::kkt_residual`] is `‖∇H(ŵ)‖₂` for smooth
/// losses without a box and the norm of the gradient mapping with a box. For
/// the absolute loss it is the larger of `‖(1/n) Xᵀ s + μ (ŵ + θ₀)‖₂`, with
/// `s_i ∈ ∂|·|(u_i)` the ADMM multipliers, and the split gap
/// `‖X ŵ - ξ - u‖₂ / √n`.
pub fn erm_solve(instance: &ProblemInstance, opts: &SolverOptions) -> Result<Solution> {
    instance.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    match instance.loss {
        LossKind::Absolute if instance.bound.is_none() => admm_absolute(instance, opts),
        LossKind::Absolute => homotopy(instance, opts, 0.1, 1e-6),
        kind => fista(instance, &SmoothPart::Exact(kind), opts, DVector::zeros(instance.p()), Method::Fista),
    }
}

/// Cross-check path for non-smooth losses: FISTA on the C³ smoothed loss
/// with `rho` shrinking geometrically from `rho_start` to `rho_end`.
pub fn erm_solve_smoothed(
    instance: &ProblemInstance,
    opts: &SolverOptions,
    rho_start: f64,
    rho_end: f64,
) -> Result<Solution> {
    instance.validate()?;
    homotopy(instance, opts, rho_start, rho_end)
}

fn homotopy(instance: &ProblemInstance, opts: &SolverOptions, rho_start: f64, rho_end: f64) -> Result<Solution> {
    if !(rho_end > 0.0 && rho_end <= rho_start && rho_start < 1.0) {
        return Err(Error::arg("need 0 < rho_end <= rho_start < 1"));
    }
    let mut w = DVector::zeros(instance.p());
    let mut rho = rho_start;
    let mut iterations = 0;
    let mut trace = Vec::new();
    loop {
        let smooth = SmoothPart::Smoothed(instance.loss.smoothing(rho)?);
        let sol = fista(instance, &smooth, opts, w, Method::SmoothingHomotopy)?;
        iterations += sol.iterations;
        trace.extend(sol.trace);
        w = sol.w_hat;
        if rho <= rho_end {
            return Ok(Solution {
                objective: objective(instance, &w),
                w_hat: w,
                kkt_residual: sol.kkt_residual,
                iterations,
                converged: sol.converged,
                method: Method::SmoothingHomotopy,
                trace,
            });
        }
        rho = (rho * 0.1).max(rho_end);
    }
}

enum SmoothPart {
    Exact(LossKind),
    Smoothed(SmoothedLoss),
}

impl SmoothPart {
    fn value(&self, r: f64) -> f64 {
        match self {
            SmoothPart::Exact(k) => k.value(r),
            SmoothPart::Smoothed(s) => s.value(r),
        }
    }

    fn derivative(&self, r: f64) -> f64 {
        match self {
            SmoothPart::Exact(k) => k.derivative(r),
            SmoothPart::Smoothed(s) => s.derivative(r),
        }
    }

    fn lipschitz(&self) -> f64 {
        match self {
            SmoothPart::Exact(k) => k.derivative_lipschitz().expect("smooth loss"),
            SmoothPart::Smoothed(s) => s.derivative_lipschitz(),
        }
    }
}

/// Largest squared singular value of `x`, slightly inflated.
fn spectral_norm_sq(x: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    if p == 0 || x.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(p, |i, _| 1.0 + 0.5 * ((i as f64) * 0.7).sin());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..50 {
        let xv = x * &v;
        let u = x.tr_mul(&xv);
        let norm = u.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&u);
        v = u / norm;
        if (next - est).abs() <= 1e-6 * next {
            est = next;
            break;
        }
        est = next;
    }
    est * 1.05
}

fn fista(
    instance: &ProblemInstance,
    smooth: &SmoothPart,
    opts: &SolverOptions,
    start: DVector<f64>,
    method: Method,
) -> Result<Solution> {
    let x = &instance.data.x;
    let n = instance.n() as f64;
    let mu = instance.ridge();
    let theta0 = &instance.data.theta0;
    let bound = instance.bound;

    let smooth_value = |r: &DVector<f64>| r.iter().map(|&v| smooth.value(v)).sum::<f64>() / n;
    let smooth_grad = |r: &DVector<f64>| x.tr_mul(&r.map(|v| smooth.derivative(v))) / n;
    let prox_g = |v: &DVector<f64>, step: f64| -> DVector<f64> {
        let mut out = DVector::from_fn(v.len(), |i, _| (v[i] - step * mu * theta0[i]) / (1.0 + step * mu));
        if let Some(b) = bound {
            out.apply(|z| *z = z.clamp(-b, b));
        }
        out
    };
    let ridge = |w: &DVector<f64>| 0.5 * mu * (w + theta0).norm_squared();
    let certificate = |w: &DVector<f64>, grad: &DVector<f64>, lip: f64| -> f64 {
        match bound {
            None => (grad + (w + theta0) * mu).norm(),
            Some(_) => (w - prox_g(&(w - grad / lip), 1.0 / lip)).norm() * lip,
        }
    };

    let mut lip = (smooth.lipschitz() * spectral_norm_sq(x) / n).max(1e-12);
    let mut w = match bound {
        Some(b) => start.map(|z| z.clamp(-b, b)),
        None => start,
    };
    let mut r_w = instance.residuals(&w);
    let mut obj_w = smooth_value(&r_w) + ridge(&w);
    let mut grad_w = smooth_grad(&r_w);
    let mut kkt = certificate(&w, &grad_w, lip);
    let mut y = w.clone();
    let mut t: f64 = 1.0;
    let mut momentum_free = true;
    let mut trace = Vec::new();
    let mut iterations = 0;

    while kkt > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let r_y = instance.residuals(&y);
        let f_y = smooth_value(&r_y);
        let grad_y = smooth_grad(&r_y);
        let (z, r_z, f_z) = loop {
            let z = prox_g(&(&y - &grad_y / lip), 1.0 / lip);
            let r_z = instance.residuals(&z);
            let f_z = smooth_value(&r_z);
            let diff = &z - &y;
            let model = f_y + grad_y.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if f_z <= model + 1e-12 * (1.0 + f_y.abs()) || lip > 1e300 {
                break (z, r_z, f_z);
            }
            lip *= 2.0;
        };
        let obj_z = f_z + ridge(&z);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // A step taken from the incumbent itself is a plain proximal gradient
        // step; accept it even if roundoff makes the objective tick up, or
        // the restart below would repeat it forever.
        if obj_z <= obj_w || momentum_free {
            let w_prev = std::mem::replace(&mut w, z);
            r_w = r_z;
            obj_w = obj_z;
            grad_w = smooth_grad(&r_w);
            y = &w + (&w - &w_prev) * ((t - 1.0) / t_next);
            t = t_next;
            momentum_free = false;
        } else {
            // Function-value restart: drop momentum, keep the incumbent.
            y = w.clone();
            t = 1.0;
            momentum_free = true;
        }
        kkt = certificate(&w, &grad_w, lip);
        trace.push(obj_w);
    }

    Ok(Solution {
        objective: obj_w,
        converged: kkt <= opts.tol,
        w_hat: w,
        kkt_residual: kkt,
        iterations,
        method,
        trace,
    })
}

/// ADMM on `min Σ|u_i| + (ν/2)‖w + θ₀‖²` subject to `u = X w - ξ`, with
/// `ν = n μ` and residual balancing of the penalty parameter.
fn admm_absolute(instance: &ProblemInstance, opts: &SolverOptions) -> Result<Solution> {
    let x = &instance.data.x;
    let xi = &instance.data.xi;
    let theta0 = &instance.data.theta0;
    let (n, p) = x.shape();
    let nf = n as f64;
    let mu = instance.ridge();
    let nu = nf * mu;
    let gram = x.tr_mul(x);

    let factor = |rho: f64| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let a = &gram * rho + DMatrix::identity(p, p) * nu;
        a.cholesky()
            .ok_or_else(|| Error::NotConverged("ADMM system matrix is not positive definite".into()))
    };

    let mut rho = 1.0;
    let mut chol = factor(rho)?;
    let mut u = DVector::<f64>::zeros(n);
    let mut dual = DVector::<f64>::zeros(n);
    let mut w = DVector::<f64>::zeros(p);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut best: Option<(f64, DVector<f64>)> = None;

    while iterations < opts.max_iter {
        iterations += 1;
        let rhs = x.tr_mul(&((&u + xi) * rho - &dual)) - theta0 * nu;
        w = chol.solve(&rhs);
        let v = x * &w - xi;
        let u_prev = std::mem::replace(&mut u, DVector::zeros(n));
        for i in 0..n {
            let s = v[i] + dual[i] / rho;
            u[i] = s.signum() * (s.abs() - 1.0 / rho).max(0.0);
        }
        let split = &v - &u;
        dual += &split * rho;

        let stationarity = ((x.tr_mul(&dual) + (&w + theta0) * nu) / nf).norm();
        let gap = split.norm() / nf.sqrt();
        kkt = stationarity.max(gap);
        let obj = v.iter().map(|r| r.abs()).sum::<f64>() / nf + 0.5 * mu * (&w + theta0).norm_squared();
        trace.push(obj);
        if best.as_ref().is_none_or(|(k, _)| kkt < *k) {
            best = Some((kkt, w.clone()));
        }
        if kkt <= opts.tol {
            break;
        }
        if iterations % 10 == 0 {
            let dual_res = rho * (x.tr_mul(&(&u - &u_prev))).norm() / nf;
            if gap > 10.0 * dual_res {
                rho *= 2.0;
                chol = factor(rho)?;
            } else if dual_res > 10.0 * gap {
                rho /= 2.0;
                chol = factor(rho)?;
            }
        }
    }

    let converged = kkt <= opts.tol;
    if !converged {
        if let Some((k, bw)) = best {
            w = bw;
            kkt = k;
        }
    }
    Ok(Solution {
        objective: objective(instance, &w),
        w_hat: w,
        kkt_residual: kkt,
        iterations,
        converged,
        method: Method::Admm,
        trace,
    })
}

/// Coordinate-wise subgradient check for the absolute loss: residuals with
/// `|r_i| <= kink_tol` are treated as kinks whose sign is free in `[-1, 1]`.
/// Returns `max_j dist(0, [g_j - s_j, g_j + s_j])`.
pub fn subgradient_gap(instance: &ProblemInstance, w: &DVector<f64>, kink_tol: f64) -> f64 {
    let x = &instance.data.x;
    let r = instance.residuals(w);
    let n = instance.n() as f64;
    let mut fixed = vec![0.0; r.len()];
    let mut free = vec![0.0; r.len()];
    for i in 0..r.len() {
        if r[i].abs() <= kink_tol {
            free[i] = 1.0;
        } else {
            fixed[i] = r[i].signum();
        }
    }
    let fixed = DVector::from_vec(fixed);
    let g = x.tr_mul(&fixed) / n + (w + &instance.data.theta0) * instance.ridge();
    (0..instance.p())
        .map(|j| {
            let spread: f64 = (0..r.len()).map(|i| free[i] * x[(i, j)].abs()).sum::<f64>() / n;
            (g[j].abs() - spread).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// `-(1/β) log Σ exp(-β x_j)`, shifted by the minimum for stability.
pub fn soft_min(values: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("soft_min needs at least one value"));
    }
    if !(beta > 0.0) {
        return Err(Error::arg("soft_min needs beta > 0"));
    }
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = values.iter().map(|&v| (-beta * (v - m)).exp()).sum();
    Ok(m - sum.ln() / beta)
}

const GRID_LIMIT: f64 = 1e7;

/// `δℤ^p ∩ [-L, L]^p`, row per point, in lexicographic order.
pub fn discretize_box(bound: f64, delta: f64, p: usize) -> Result<DMatrix<f64>> {
    if !(bound >= 1.0) {
        return Err(Error::arg("box bound must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) && delta != 1.0 {
        return Err(Error::arg("grid spacing must lie in (0, 1]"));
    }
    if p == 0 {
        return Err(Error::arg("dimension must be positive"));
    }
    let half = (bound / delta + 1e-9).floor() as i64;
    let per_axis = (2 * half + 1) as usize;
    let estimate = (per_axis as f64).powi(p as i32);
    if estimate > GRID_LIMIT {
        return Err(Error::TooLarge { estimate, limit: GRID_LIMIT });
    }
    let count = per_axis.pow(p as u32);
    Ok(DMatrix::from_fn(count, p, |row, col| {
        let stride = per_axis.pow((p - 1 - col) as u32);
        let k = (row / stride) % per_axis;
        (k as i64 - half) as f64 * delta
    }))
}

/// Minimum of `H` over the rows of `points`.
pub fn grid_minimum(instance: &ProblemInstance, points: &DMatrix<f64>) -> f64 {
    (0..points.nrows())
        .map(|i| objective(instance, &points.row(i).transpose()))
        .fold(f64::INFINITY, f64::min)
}
