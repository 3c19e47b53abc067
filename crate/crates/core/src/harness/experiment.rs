//! Replicated ERM experiments: design-vs-Gaussian universality and error
//! convergence against the state-evolution prediction.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{ks_critical, ks_statistic, mean, paired_gap, variance, GapStat};
use crate::design::{BlockModel, DesignSampler, DesignSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::rng::{self, Purpose};
use crate::solver::{erm_solve, NoiseSpec, PenaltyScale, ProblemInstance, RegressionData, Solution, SolverOptions, Theta0Spec};
use crate::statepoint::{solve_state_evolution, StateEvolutionInput, StateEvolutionOptions, StateEvolutionSolution};

/// Largest fraction of replications that may be dropped for
/// non-convergence before a run counts as failed.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub design: DesignSpec,
    pub loss: LossKind,
    pub lambda: f64,
    #[serde(default)]
    pub penalty_scale: PenaltyScale,
    pub theta0: Theta0Spec,
    pub noise: NoiseSpec,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.design.validate(Some(&self.loss))?;
        self.loss.validate()?;
        self.theta0.validate(self.design.p)?;
        self.noise.validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::spec("lambda must be positive"));
        }
        if self.replications < 2 {
            return Err(Error::spec("need at least two replications"));
        }
        Ok(())
    }

    fn instance(&self, data: RegressionData) -> ProblemInstance {
        ProblemInstance::new(data, self.lambda, self.loss).with_penalty(self.penalty_scale)
    }
}

/// Per-replication record for one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArmRecord {
    pub objective: f64,
    /// `p⁻¹ ‖θ̂ - θ₀‖²`
    pub error: f64,
    pub sup_norm: f64,
    pub first_coordinate: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ArmRecord {
    fn new(sol: &Solution) -> Self {
        let p = sol.w_hat.len() as f64;
        ArmRecord {
            objective: sol.objective,
            error: sol.w_hat.norm_squared() / p,
            sup_norm: sol.w_hat.amax(),
            first_coordinate: sol.w_hat[0],
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            converged: sol.converged,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub x_arm: ArmRecord,
    pub g_arm: ArmRecord,
}

impl ReplicationRecord {
    pub fn kept(&self) -> bool {
        self.x_arm.converged && self.g_arm.converged
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniversalityResult {
    pub replications: usize,
    pub kept: usize,
    pub excluded: usize,
    /// False when more than [`MAX_EXCLUDED_FRACTION`] of replications failed.
    pub within_exclusion_budget: bool,
    pub ks_objective: f64,
    pub ks_error: f64,
    pub ks_first_coordinate: f64,
    /// Two-sample KS critical value at level 1% for the kept sample sizes.
    pub ks_critical_1pct: f64,
    pub objective_mean_gap: GapStat,
    pub objective_variance_gap: GapStat,
    pub error_mean_gap: GapStat,
    /// `max_j mean_r |ŵ_j|` per arm.
    pub max_mean_abs_coordinate: [f64; 2],
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

fn solve_arm(config: &ExperimentConfig, data: RegressionData) -> Result<(ArmRecord, DVector<f64>)> {
    let inst = config.instance(data);
    let sol = erm_solve(&inst, &config.solver)?;
    Ok((ArmRecord::new(&sol), sol.w_hat))
}

/// Runs both arms on every replication. `θ₀` and `ξ` are shared within a
/// replication; `X` and `G` come from separate streams.
pub fn run_universality(config: &ExperimentConfig) -> Result<UniversalityResult> {
    config.validate()?;
    let sampler = DesignSampler::new(&config.design)?;
    let p = config.design.p;
    let rows: Vec<(ReplicationRecord, DVector<f64>, DVector<f64>)> = (0..config.replications)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let rep = r as u64;
            let theta0 = config.theta0.draw(p, &mut rng::stream(config.seed, rep, Purpose::Theta0));
            let mut noise_rng = rng::stream(config.seed, rep, Purpose::Noise);
            let xi = DVector::from_fn(config.design.n, |_, _| config.noise.draw(&mut noise_rng));
            let x = sampler.sample(&mut rng::stream(config.seed, rep, Purpose::Design));
            let g = sampler.sample_gaussian(&mut rng::stream(config.seed, rep, Purpose::Gaussian));
            let (xa, wx) = solve_arm(config, RegressionData::new(x, theta0.clone(), xi.clone())?)?;
            let (ga, wg) = solve_arm(config, RegressionData::new(g, theta0, xi)?)?;
            Ok((ReplicationRecord { replication: r, x_arm: xa, g_arm: ga }, wx.abs(), wg.abs()))
        })
        .collect::<Result<_>>()?;

    let kept: Vec<&(ReplicationRecord, DVector<f64>, DVector<f64>)> = rows.iter().filter(|r| r.0.kept()).collect();
    let excluded = rows.len() - kept.len();
    if kept.len() < 2 {
        return Err(Error::NotConverged(format!(
            "only {} of {} replications converged",
            kept.len(),
            rows.len()
        )));
    }
    let col = |f: fn(&ArmRecord) -> f64, x: bool| -> Vec<f64> {
        kept.iter().map(|r| f(if x { &r.0.x_arm } else { &r.0.g_arm })).collect()
    };
    let (ox, og) = (col(|a| a.objective, true), col(|a| a.objective, false));
    let (ex, eg) = (col(|a| a.error, true), col(|a| a.error, false));
    let (fx, fg) = (col(|a| a.first_coordinate, true), col(|a| a.first_coordinate, false));
    let mut sum_x = DVector::zeros(p);
    let mut sum_g = DVector::zeros(p);
    for r in &kept {
        sum_x += &r.1;
        sum_g += &r.2;
    }
    let k = kept.len() as f64;
    Ok(UniversalityResult {
        replications: rows.len(),
        kept: kept.len(),
        excluded,
        within_exclusion_budget: excluded as f64 <= MAX_EXCLUDED_FRACTION * rows.len() as f64,
        ks_objective: ks_statistic(&ox, &og)?,
        ks_error: ks_statistic(&ex, &eg)?,
        ks_first_coordinate: ks_statistic(&fx, &fg)?,
        ks_critical_1pct: ks_critical(0.01, kept.len(), kept.len()),
        objective_mean_gap: paired_gap(&ox, &og, mean)?,
        objective_variance_gap: paired_gap(&ox, &og, variance)?,
        error_mean_gap: paired_gap(&ex, &eg, mean)?,
        max_mean_abs_coordinate: [sum_x.max() / k, sum_g.max() / k],
        records: rows.into_iter().map(|r| r.0).collect(),
    })
}

/// State-evolution input implied by a config: `τ₀ = n/p`, the noise, `E Π₀²`
/// and `λ` in the units of the fixed-point system (`nλ` under the plain
/// penalty, `λ` under the sample-normalized one).
pub fn state_evolution_input(config: &ExperimentConfig) -> StateEvolutionInput {
    let n = config.design.n as f64;
    StateEvolutionInput {
        tau0: n / config.design.p as f64,
        lambda: match config.penalty_scale {
            PenaltyScale::Plain => n * config.lambda,
            PenaltyScale::SampleNormalized => config.lambda,
        },
        loss: config.loss,
        noise: config.noise,
        pi0_second_moment: config.theta0.second_moment(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub replications: usize,
    pub kept: usize,
    pub excluded: usize,
    pub within_exclusion_budget: bool,
    pub mean_error: f64,
    pub standard_error: f64,
    pub predicted_error: f64,
    /// `|mean_error - predicted_error| / predicted_error`
    pub relative_gap: f64,
    /// The prediction assumes `Σ = I`.
    pub isotropic_design: bool,
    pub state_evolution_input: StateEvolutionInput,
    pub state_evolution: StateEvolutionSolution,
    #[serde(skip)]
    pub records: Vec<(usize, ArmRecord)>,
}

/// Mean of `p⁻¹ ‖θ̂ - θ₀‖²` over replications against `τ₀ γ*²`.
pub fn run_error_convergence(config: &ExperimentConfig, se_opts: &StateEvolutionOptions) -> Result<ConvergenceReport> {
    config.validate()?;
    if matches!(config.loss, LossKind::Squared) {
        return Err(Error::spec("error convergence runs take the absolute or huber loss"));
    }
    let se_input = state_evolution_input(config);
    let se = solve_state_evolution(&se_input, se_opts)?;
    if !se.converged {
        return Err(Error::NotConverged(format!(
            "state evolution stopped with residuals ({:e}, {:e})",
            se.eq1_residual, se.eq2_residual
        )));
    }
    let sampler = DesignSampler::new(&config.design)?;
    let records: Vec<(usize, ArmRecord)> = (0..config.replications)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let data = crate::solver::synth_data(&sampler, &config.theta0, &config.noise, config.seed, r as u64)?;
            Ok((r, solve_arm(config, data)?.0))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = records.iter().filter(|r| r.1.converged).map(|r| r.1.error).collect();
    let excluded = records.len() - errors.len();
    if errors.len() < 2 {
        return Err(Error::NotConverged(format!(
            "only {} of {} replications converged",
            errors.len(),
            records.len()
        )));
    }
    let m = mean(&errors);
    Ok(ConvergenceReport {
        replications: records.len(),
        kept: errors.len(),
        excluded,
        within_exclusion_budget: excluded as f64 <= MAX_EXCLUDED_FRACTION * records.len() as f64,
        mean_error: m,
        standard_error: (variance(&errors) / errors.len() as f64).sqrt(),
        predicted_error: se.predicted_error,
        relative_gap: (m - se.predicted_error).abs() / se.predicted_error,
        isotropic_design: matches!(config.design.covariance.block_model, BlockModel::Identity)
            && config.design.entry_scale == 1.0,
        state_evolution_input: se_input,
        state_evolution: se,
        records,
    })
}
