//! Two-equation fixed point for the ridge-penalized robust estimator.
//!
//! With `v = γZ + ξ` and `e = v - prox(v; β)`, the system is
//!
//! ```text
//! γ²/τ₀           = E[e²] + λ²β² E Π₀²
//! 1 - 1/τ₀ + λβ   = E[prox'(v; β)]
//! ```
//!
//! and the predicted error is `τ₀ γ²`. The prox of every supported loss is
//! piecewise linear, so the expectation over `Z` given `ξ` is taken in closed
//! form. Gaussian `ξ` folds into `Z` exactly (`v ~ N(0, γ² + σ²)`), two-point
//! noise is summed over its atoms and Student-t noise uses a fixed-seed Monte
//! Carlo sample. A Gauss–Hermite rule over `ξ` is kept as a cross-check.
//!
//! `λ` here multiplies `β` directly. For the objective
//! `(1/n) Σ ℓ + (λ/(2n)) ‖w + θ₀‖²` it is the same `λ`; for the plain
//! `(λ/2) ‖w + θ₀‖²` scaling it is `nλ`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::quadrature::normal_rule;
use crate::rng::{self, Purpose};
use crate::solver::NoiseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEvolutionInput {
    pub tau0: f64,
    pub lambda: f64,
    pub loss: LossKind,
    pub noise: NoiseSpec,
    pub pi0_second_moment: f64,
}

impl StateEvolutionInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(Error::spec(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::spec(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.pi0_second_moment >= 0.0 && self.pi0_second_moment.is_finite()) {
            return Err(Error::spec("pi0_second_moment must be nonnegative"));
        }
        self.loss.validate()?;
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateEvolutionOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Residual below which the fixed-point phase hands over to Newton.
    pub newton_switch: f64,
    pub mc_draws: usize,
    pub mc_seed: u64,
    /// Starting `(β, γ)`; defaults to `(1, √(E ξ² + E Π₀²))`.
    pub init: Option<[f64; 2]>,
}

impl Default for StateEvolutionOptions {
    fn default() -> Self {
        StateEvolutionOptions {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            newton_switch: 1e-2,
            mc_draws: 100_000,
            mc_seed: 0,
            init: None,
        }
    }
}

impl StateEvolutionOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::arg("tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::arg("damping must lie in (0, 1]"));
        }
        if self.mc_draws < 2 {
            return Err(Error::arg("need at least two Monte Carlo draws"));
        }
        if let Some([b, g]) = self.init {
            if !(b > 0.0 && g > 0.0) {
                return Err(Error::arg("initial point must be positive"));
            }
        }
        Ok(())
    }
}

/// Discrete law of `ξ` used for the outer expectation.
#[derive(Clone, Debug)]
pub struct NoiseRule {
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Gaussian variance added to `γ²` at every point.
    spread: f64,
    monte_carlo: bool,
}

impl NoiseRule {
    pub fn new(noise: &NoiseSpec, opts: &StateEvolutionOptions) -> Result<Self> {
        noise.validate()?;
        Ok(match *noise {
            NoiseSpec::Gaussian { variance } => NoiseRule {
                points: vec![0.0],
                weights: vec![1.0],
                spread: variance,
                monte_carlo: false,
            },
            NoiseSpec::TwoPoint { a } => NoiseRule {
                points: vec![-a, a],
                weights: vec![0.5, 0.5],
                spread: 0.0,
                monte_carlo: false,
            },
            NoiseSpec::StudentT { .. } => {
                let mut rng = rng::stream(opts.mc_seed, 0, Purpose::Quadrature);
                let points: Vec<f64> = (0..opts.mc_draws).map(|_| noise.draw(&mut rng)).collect();
                let w = 1.0 / points.len() as f64;
                NoiseRule { weights: vec![w; points.len()], points, spread: 0.0, monte_carlo: true }
            }
        })
    }

    /// `nodes`-point Gauss–Hermite rule for `ξ ~ N(0, variance)`.
    pub fn gauss_hermite(variance: f64, nodes: usize) -> Result<Self> {
        if !(variance >= 0.0) || nodes == 0 {
            return Err(Error::arg("need a nonnegative variance and at least one node"));
        }
        let (points, weights) = normal_rule(nodes, variance.sqrt());
        Ok(NoiseRule { points, weights, spread: 0.0, monte_carlo: false })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_monte_carlo(&self) -> bool {
        self.monte_carlo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Expectations {
    /// `E[e²]`
    pub residual_sq: f64,
    /// `E[e]`
    pub residual: f64,
    /// `E[prox']`
    pub prox_derivative: f64,
    /// Monte Carlo standard errors of the two main expectations; zero under
    /// quadrature.
    pub residual_sq_se: f64,
    pub prox_derivative_se: f64,
}

fn norm_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

fn norm_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Truncated moments of `v ~ N(m, s²)` on `|v| <= t`.
struct Window {
    inside: f64,
    above: f64,
    below: f64,
    first: f64,
    second: f64,
}

fn window(m: f64, s: f64, t: f64) -> Window {
    let a = (-t - m) / s;
    let b = (t - m) / s;
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let below = norm_cdf(a);
    let above = norm_cdf(-b);
    let inside = (1.0 - below - above).max(0.0);
    let first = m * inside + s * (pa - pb);
    let second = m * m * inside + 2.0 * m * s * (pa - pb) + s * s * (inside + a * pa - b * pb);
    Window { inside, above, below, first, second }
}

/// `(E[e²], E[e], E[prox'])` given `ξ = m`, over `Z`.
fn conditional(loss: &LossKind, m: f64, gamma: f64, beta: f64) -> (f64, f64, f64) {
    match *loss {
        LossKind::Squared => {
            let c = 2.0 * beta / (1.0 + 2.0 * beta);
            (c * c * (m * m + gamma * gamma), c * m, 1.0 / (1.0 + 2.0 * beta))
        }
        LossKind::Absolute => {
            let w = window(m, gamma, beta);
            let out = w.above + w.below;
            (w.second.max(0.0) + beta * beta * out, w.first + beta * (w.above - w.below), out)
        }
        LossKind::Huber { eta } => {
            let t = eta * (1.0 + beta);
            let k = beta / (1.0 + beta);
            let w = window(m, gamma, t);
            let out = w.above + w.below;
            let be = beta * eta;
            (
                k * k * w.second.max(0.0) + be * be * out,
                k * w.first + be * (w.above - w.below),
                w.inside / (1.0 + beta) + out,
            )
        }
    }
}

/// All three expectations at `(γ, β)` under a fixed noise rule.
pub fn expectations(loss: &LossKind, rule: &NoiseRule, gamma: f64, beta: f64) -> Result<Expectations> {
    if !(gamma > 0.0 && beta > 0.0) {
        return Err(Error::arg(format!("need gamma, beta > 0, got ({gamma}, {beta})")));
    }
    let (mut e2, mut e1, mut pd) = (0.0, 0.0, 0.0);
    let (mut e2sq, mut pdsq) = (0.0, 0.0);
    for (&m, &w) in rule.points.iter().zip(&rule.weights) {
        let (a, b, c) = conditional(loss, m, (gamma * gamma + rule.spread).sqrt(), beta);
        e2 += w * a;
        e1 += w * b;
        pd += w * c;
        if rule.monte_carlo {
            e2sq += w * a * a;
            pdsq += w * c * c;
        }
    }
    let se = |sq: f64, mean: f64| {
        if rule.monte_carlo {
            let m = rule.len() as f64;
            ((sq - mean * mean).max(0.0) * m / (m - 1.0) / m).sqrt()
        } else {
            0.0
        }
    };
    Ok(Expectations {
        residual_sq: e2,
        residual: e1,
        prox_derivative: pd,
        residual_sq_se: se(e2sq, e2),
        prox_derivative_se: se(pdsq, pd),
    })
}

/// `E[(γZ + ξ - prox(γZ + ξ; β))²]` under default quadrature settings.
pub fn expected_residual_sq(gamma: f64, beta: f64, input: &StateEvolutionInput) -> Result<f64> {
    let rule = NoiseRule::new(&input.noise, &StateEvolutionOptions::default())?;
    Ok(expectations(&input.loss, &rule, gamma, beta)?.residual_sq)
}

/// `E[prox'(γZ + ξ; β)]` under default quadrature settings.
pub fn expected_prox_derivative(gamma: f64, beta: f64, input: &StateEvolutionInput) -> Result<f64> {
    let rule = NoiseRule::new(&input.noise, &StateEvolutionOptions::default())?;
    Ok(expectations(&input.loss, &rule, gamma, beta)?.prox_derivative)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FixedPoint,
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub beta: f64,
    pub gamma: f64,
    pub eq1_residual: f64,
    pub eq2_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateEvolutionSolution {
    pub beta_star: f64,
    pub gamma_star: f64,
    /// `E[e²] + λ²β² E Π₀² - γ²/τ₀`
    pub eq1_residual: f64,
    /// `E[prox'] - (1 - 1/τ₀ + λβ)`
    pub eq2_residual: f64,
    /// First equation with `E[e]` in place of `E[e²]`.
    pub raw_eq1_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub predicted_error: f64,
    pub expectations: Expectations,
    pub quadrature: String,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

struct System<'a> {
    input: &'a StateEvolutionInput,
    rule: NoiseRule,
}

impl System<'_> {
    fn residuals(&self, beta: f64, gamma: f64) -> Result<(f64, f64, Expectations)> {
        let i = self.input;
        let e = expectations(&i.loss, &self.rule, gamma, beta)?;
        let eq1 = e.residual_sq + i.lambda * i.lambda * beta * beta * i.pi0_second_moment - gamma * gamma / i.tau0;
        let eq2 = e.prox_derivative - (1.0 - 1.0 / i.tau0 + i.lambda * beta);
        Ok((eq1, eq2, e))
    }

    /// Root in `β` of the second equation with `γ` held fixed. The left
    /// side is decreasing in `β`, positive at `0⁺` and eventually negative.
    fn beta_given_gamma(&self, gamma: f64) -> Result<f64> {
        let g = |b: f64| -> Result<f64> { Ok(self.residuals(b, gamma)?.1) };
        let (mut lo, mut f_lo) = (0.0, 1.0 / self.input.tau0);
        let mut hi = 1.0;
        let mut f_hi = g(hi)?;
        while f_hi > 0.0 {
            lo = hi;
            f_lo = f_hi;
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::NotConverged("no bracket for beta".into()));
            }
            f_hi = g(hi)?;
        }
        // Illinois variant of regula falsi.
        let mut side = 0i8;
        for _ in 0..200 {
            let mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            let mid = if mid > lo && mid < hi { mid } else { 0.5 * (lo + hi) };
            let f_mid = g(mid)?;
            if f_mid == 0.0 || (hi - lo) <= 1e-15 * hi {
                return Ok(mid);
            }
            if f_mid > 0.0 {
                lo = mid;
                f_lo = f_mid;
                if side == 1 {
                    f_hi *= 0.5;
                }
                side = 1;
            } else {
                hi = mid;
                f_hi = f_mid;
                if side == -1 {
                    f_lo *= 0.5;
                }
                side = -1;
            }
            if (hi - lo) <= 1e-14 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn sup(a: f64, b: f64) -> f64 {
    a.abs().max(b.abs())
}

/// Damped fixed-point iteration followed by 2-D Newton with a
/// finite-difference Jacobian. A run that stalls is returned with
/// `converged = false` and its trace.
pub fn solve_state_evolution(
    input: &StateEvolutionInput,
    opts: &StateEvolutionOptions,
) -> Result<StateEvolutionSolution> {
    input.validate()?;
    opts.validate()?;
    let sys = System { input, rule: NoiseRule::new(&input.noise, opts)? };
    let [mut beta, mut gamma] = opts
        .init
        .unwrap_or([1.0, (input.noise.second_moment() + input.pi0_second_moment).sqrt().max(1e-3)]);
    let mut trace = Vec::new();
    let (mut eq1, mut eq2, _) = sys.residuals(beta, gamma)?;
    trace.push(TraceRow { iteration: 0, phase: Phase::FixedPoint, beta, gamma, eq1_residual: eq1, eq2_residual: eq2 });
    let mut it = 0;
    let fp_budget = opts.max_iter.div_ceil(2).max(1);
    let a = opts.damping;
    while sup(eq1, eq2) >= opts.newton_switch && sup(eq1, eq2) > opts.tol && it < fp_budget {
        it += 1;
        let target = sys.beta_given_gamma(gamma)?;
        beta += a * (target - beta);
        let e = expectations(&input.loss, &sys.rule, gamma, beta)?;
        let lb = input.lambda * beta;
        let g_new = (input.tau0 * (e.residual_sq + lb * lb * input.pi0_second_moment)).sqrt();
        gamma += a * (g_new - gamma);
        (eq1, eq2, _) = sys.residuals(beta, gamma)?;
        trace.push(TraceRow { iteration: it, phase: Phase::FixedPoint, beta, gamma, eq1_residual: eq1, eq2_residual: eq2 });
    }

    let mut stalled = false;
    while sup(eq1, eq2) > opts.tol && it < opts.max_iter && !stalled {
        it += 1;
        let hb = 1e-5 * beta.max(1e-3);
        let hg = 1e-5 * gamma.max(1e-3);
        let hb = hb.min(0.5 * beta);
        let hg = hg.min(0.5 * gamma);
        let (f1bp, f2bp, _) = sys.residuals(beta + hb, gamma)?;
        let (f1bm, f2bm, _) = sys.residuals(beta - hb, gamma)?;
        let (f1gp, f2gp, _) = sys.residuals(beta, gamma + hg)?;
        let (f1gm, f2gm, _) = sys.residuals(beta, gamma - hg)?;
        let j11 = (f1bp - f1bm) / (2.0 * hb);
        let j21 = (f2bp - f2bm) / (2.0 * hb);
        let j12 = (f1gp - f1gm) / (2.0 * hg);
        let j22 = (f2gp - f2gm) / (2.0 * hg);
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let db = -(j22 * eq1 - j12 * eq2) / det;
        let dg = -(-j21 * eq1 + j11 * eq2) / det;
        let norm0 = eq1.hypot(eq2);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (b, g) = (beta + step * db, gamma + step * dg);
            if b > 0.0 && g > 0.0 {
                let (n1, n2, _) = sys.residuals(b, g)?;
                if n1.hypot(n2) <= (1.0 - 1e-4 * step) * norm0 {
                    beta = b;
                    gamma = g;
                    eq1 = n1;
                    eq2 = n2;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
        }
        trace.push(TraceRow { iteration: it, phase: Phase::Newton, beta, gamma, eq1_residual: eq1, eq2_residual: eq2 });
    }

    let (eq1, eq2, e) = sys.residuals(beta, gamma)?;
    let lb = input.lambda * beta;
    let raw = e.residual + lb * lb * input.pi0_second_moment - gamma * gamma / input.tau0;
    let quadrature = match input.noise {
        NoiseSpec::Gaussian { .. } => "gaussian_exact".to_string(),
        NoiseSpec::TwoPoint { .. } => "two_point_exact".to_string(),
        NoiseSpec::StudentT { .. } => format!("monte_carlo_{}", opts.mc_draws),
    };
    Ok(StateEvolutionSolution {
        beta_star: beta,
        gamma_star: gamma,
        eq1_residual: eq1,
        eq2_residual: eq2,
        raw_eq1_residual: raw,
        iterations: it,
        converged: sup(eq1, eq2) <= opts.tol,
        predicted_error: input.tau0 * gamma * gamma,
        expectations: e,
        quadrature,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiStartReport {
    pub starts: Vec<[f64; 2]>,
    pub solutions: Vec<[f64; 2]>,
    pub all_converged: bool,
    /// Largest coordinate distance between any solution and the first.
    pub max_disagreement: f64,
    pub agree: bool,
}

/// Solves from `starts` random points in `(0.01, 10)²` and compares the roots.
pub fn multi_start(
    input: &StateEvolutionInput,
    opts: &StateEvolutionOptions,
    starts: usize,
    seed: u64,
    agree_tol: f64,
) -> Result<MultiStartReport> {
    if starts == 0 {
        return Err(Error::arg("need at least one start"));
    }
    let mut rng = rng::stream(seed, 0, Purpose::Auxiliary);
    let points: Vec<[f64; 2]> = (0..starts)
        .map(|_| [rng.random_range(0.01..10.0), rng.random_range(0.01..10.0)])
        .collect();
    let mut solutions = Vec::with_capacity(starts);
    let mut all_converged = true;
    for &start in &points {
        let o = StateEvolutionOptions { init: Some(start), ..opts.clone() };
        let s = solve_state_evolution(input, &o)?;
        all_converged &= s.converged;
        solutions.push([s.beta_star, s.gamma_star]);
    }
    let first = solutions[0];
    let max_disagreement = solutions
        .iter()
        .map(|s| sup(s[0] - first[0], s[1] - first[1]))
        .fold(0.0, f64::max);
    Ok(MultiStartReport {
        starts: points,
        solutions,
        all_converged,
        max_disagreement,
        agree: all_converged && max_disagreement <= agree_tol,
    })
}
