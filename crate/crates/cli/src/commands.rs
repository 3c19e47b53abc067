use std::fs;
use std::path::Path;

use blockdep::design::{empirical_moment_check, write_design, DesignSampler};
use blockdep::harness::{
    admissible_d, rate_report, run_error_convergence, run_universality, state_evolution_input, Cell,
};
use blockdep::lindeberg::{mc_gap, random_path, telescoping_check, PathFunction};
use blockdep::rng::{self, Purpose};
use blockdep::solver::{erm_solve, synth_data, ProblemInstance};
use blockdep::statepoint::{multi_start, solve_state_evolution, Phase, StateEvolutionSolution};
use blockdep::{
    DesignSpec, Error, ExperimentConfig, LossKind, NoiseSpec, Partition, PenaltyScale, Result, SolverOptions,
    StateEvolutionInput, StateEvolutionOptions, Theta0Spec,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{OutDir, Table};
use crate::Io;

/// Outcome after the output files are written.
pub enum Status {
    Ok,
    Invalid(String),
    NotConverged(String),
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidSpec(format!("cannot read config {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn row(cells: impl IntoIterator<Item = Cell>) -> Vec<Cell> {
    cells.into_iter().collect()
}

fn f(v: f64) -> Cell {
    Cell::Float(v)
}

fn u(v: usize) -> Cell {
    Cell::Int(v as i64)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionConfig {
    partition: Partition,
    d: usize,
}

pub fn partition_check(io: &Io) -> Result<Status> {
    let cfg: PartitionConfig = read_config(&io.config)?;
    let out = OutDir::create(&io.out)?;
    let report = cfg.partition.validate(cfg.d);
    let mut samples = Table::new(&["m", "power_sum", "bound"]);
    if report.valid {
        let (p, d) = (cfg.partition.p() as f64, cfg.d as f64);
        for m in 1..=6u32 {
            let s = cfg.partition.power_sum(m)?;
            samples.push(row([u(m as usize), Cell::Text(s.to_string()), f(4.0 * p * d.powi(m as i32 - 1))]));
        }
    }
    let mut sizes = Table::new(&["cell", "size"]);
    for (i, s) in cfg.partition.cell_sizes().into_iter().enumerate() {
        sizes.push(row([u(i + 1), u(s)]));
    }
    out.write(&report, &samples, &sizes)?;
    Ok(match report.violation {
        Some(v) => Status::Invalid(format!("invalid partition: {v}")),
        None => Status::Ok,
    })
}

pub fn partition_merge(io: &Io) -> Result<Status> {
    let cfg: PartitionConfig = read_config(&io.config)?;
    let out = OutDir::create(&io.out)?;
    let merged = cfg.partition.merge_cells(cfg.d)?;
    let mut samples = Table::new(&["aligned_cell", "size", "source_cells"]);
    for (i, (cell, group)) in merged.cells.iter().zip(&merged.groups).enumerate() {
        let sources: Vec<String> = group.iter().map(|g| (g + 1).to_string()).collect();
        samples.push(row([u(i + 1), u(cell.len()), Cell::Text(sources.join(" "))]));
    }
    let result = json!({
        "d": merged.d,
        "threshold": merged.threshold,
        "num_cells": merged.len(),
        "sizes": merged.sizes(),
        "small_cells": merged.small_cells(),
        "is_coarsening": merged.is_coarsening(),
        "count_within_bound": merged.count_within_bound(),
        "cells": merged.cells.iter().map(|c| c.iter().map(|j| j + 1).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "groups": merged.groups.iter().map(|c| c.iter().map(|j| j + 1).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    out.write(&result, &samples, &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

/// Either explicit exponents or a loss whose profile supplies them.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatesConfig {
    n: f64,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    d: Option<f64>,
    #[serde(default)]
    loss: Option<LossKind>,
    #[serde(default)]
    qbar0: Option<f64>,
    #[serde(default)]
    q0: Option<f64>,
    #[serde(default)]
    q1: Option<f64>,
    #[serde(default)]
    alpha: f64,
    #[serde(default)]
    kappa: f64,
}

impl RatesConfig {
    fn exponents(&self) -> Result<(f64, f64, f64)> {
        let profile = self.loss.map(|l| l.profile());
        let profile = profile.as_ref();
        let pick = |explicit: Option<f64>, from: Option<f64>, name: &str| {
            explicit.or(from).ok_or_else(|| Error::InvalidSpec(format!("give `{name}` or `loss`")))
        };
        Ok((
            pick(self.qbar0, profile.map(|p| p.qbar0 as f64), "qbar0")?,
            pick(self.q0, profile.map(|p| p.q0), "q0")?,
            pick(self.q1, profile.map(|p| p.q1), "q1")?,
        ))
    }
}

pub fn rates_sigma(io: &Io) -> Result<Status> {
    let cfg: RatesConfig = read_config(&io.config)?;
    let (qbar0, q0, q1) = cfg.exponents()?;
    let (p, d) = match (cfg.p, cfg.d) {
        (Some(p), Some(d)) => (p, d),
        _ => return Err(Error::InvalidSpec("rates sigma needs `p` and `d`".into())),
    };
    let out = OutDir::create(&io.out)?;
    let report = rate_report(cfg.n, p, d, qbar0, q0, q1, cfg.alpha, cfg.kappa)?;
    out.write(&report, &Table::new(&["n"]), &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

pub fn rates_admissible_d(io: &Io) -> Result<Status> {
    let cfg: RatesConfig = read_config(&io.config)?;
    let (qbar0, _, _) = match cfg.exponents() {
        Ok(e) => e,
        Err(_) => (cfg.qbar0.ok_or_else(|| Error::InvalidSpec("give `qbar0` or `loss`".into()))?, 0.0, 0.0),
    };
    let out = OutDir::create(&io.out)?;
    let a = admissible_d(cfg.n, cfg.alpha, cfg.kappa, qbar0)?;
    let result = json!({
        "n": cfg.n, "alpha": cfg.alpha, "kappa": cfg.kappa, "qbar0": qbar0,
        "exponent": a.exponent, "log_power": a.log_power, "scale": a.scale,
    });
    out.write(&result, &Table::new(&["n"]), &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignConfig {
    design: DesignSpec,
    seed: u64,
    #[serde(default)]
    replication: u64,
    /// Draw the Gaussian analogue instead of the spec's family.
    #[serde(default)]
    gaussian: bool,
    #[serde(default)]
    loss: Option<LossKind>,
}

impl DesignConfig {
    fn sample(&self) -> Result<(DesignSampler, blockdep::DMatrix<f64>)> {
        self.design.validate(self.loss.as_ref())?;
        let sampler = DesignSampler::new(&self.design)?;
        let x = if self.gaussian {
            sampler.sample_gaussian(&mut rng::stream(self.seed, self.replication, Purpose::Gaussian))
        } else {
            sampler.sample(&mut rng::stream(self.seed, self.replication, Purpose::Design))
        };
        Ok((sampler, x))
    }

    fn family(&self) -> &'static str {
        if self.gaussian {
            "gaussian"
        } else {
            self.design.family.name()
        }
    }
}

/// Column means and second moments of `√n X`.
fn column_table(x: &blockdep::DMatrix<f64>) -> Table<'static> {
    let mut t = Table::new(&["column", "mean", "second_moment"]);
    let n = x.nrows() as f64;
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() * n.sqrt() / n;
        let second = col.norm_squared();
        t.push(row([u(j + 1), f(mean), f(second)]));
    }
    t
}

pub fn design_sample(io: &Io) -> Result<Status> {
    let cfg: DesignConfig = read_config(&io.config)?;
    let (_, x) = cfg.sample()?;
    let out = OutDir::create(&io.out)?;
    write_design(&out.path("design.bin"), &x, cfg.family(), cfg.seed)?;
    let result = json!({
        "n": x.nrows(), "p": x.ncols(), "family": cfg.family(), "seed": cfg.seed,
        "replication": cfg.replication, "file": "design.bin", "layout": "row-major little-endian f64",
    });
    out.write(&result, &column_table(&x), &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

pub fn design_check(io: &Io) -> Result<Status> {
    let cfg: DesignConfig = read_config(&io.config)?;
    let (sampler, x) = cfg.sample()?;
    let out = OutDir::create(&io.out)?;
    let report = empirical_moment_check(&x, &sampler.sigma().dense(), Some(sampler.sigma().partition()))?;
    let within = report.max_cov_z <= 5.0 && report.max_abs_mean <= 5.0 * report.mean_se_scale;
    let result = json!({
        "family": cfg.family(), "seed": cfg.seed, "moments": report, "within_5_se": within,
    });
    out.write(&result, &column_table(&x), &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveConfig {
    design: DesignSpec,
    loss: LossKind,
    lambda: f64,
    #[serde(default)]
    penalty_scale: PenaltyScale,
    theta0: Theta0Spec,
    noise: NoiseSpec,
    seed: u64,
    #[serde(default)]
    replication: u64,
    #[serde(default)]
    bound: Option<f64>,
    #[serde(default)]
    solver: SolverOptions,
}

pub fn solve(io: &Io) -> Result<Status> {
    let cfg: SolveConfig = read_config(&io.config)?;
    cfg.design.validate(Some(&cfg.loss))?;
    let sampler = DesignSampler::new(&cfg.design)?;
    let data = synth_data(&sampler, &cfg.theta0, &cfg.noise, cfg.seed, cfg.replication)?;
    let mut inst = ProblemInstance::new(data, cfg.lambda, cfg.loss).with_penalty(cfg.penalty_scale);
    if let Some(b) = cfg.bound {
        inst = inst.with_bound(b);
    }
    let sol = erm_solve(&inst, &cfg.solver)?;
    let out = OutDir::create(&io.out)?;
    let theta_hat = sol.theta_hat(&inst);
    let mut samples = Table::new(&["coordinate", "w_hat", "theta0", "theta_hat"]);
    for j in 0..inst.p() {
        samples.push(row([u(j + 1), f(sol.w_hat[j]), f(inst.data.theta0[j]), f(theta_hat[j])]));
    }
    let mut trace = Table::new(&["iteration", "objective"]);
    for (i, v) in sol.trace.iter().enumerate() {
        trace.push(row([u(i + 1), f(*v)]));
    }
    let p = inst.p() as f64;
    let result = json!({
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "method": sol.method,
        "ridge_coefficient": inst.ridge(),
        "error": sol.w_hat.norm_squared() / p,
        "sup_norm": sol.w_hat.amax(),
    });
    out.write(&result, &samples, &trace)?;
    Ok(if sol.converged {
        Status::Ok
    } else {
        Status::NotConverged(format!("solver stopped with certificate {:e}", sol.kkt_residual))
    })
}

#[derive(Deserialize)]
struct StatepointConfig {
    #[serde(flatten)]
    input: StateEvolutionInput,
    #[serde(default)]
    options: StateEvolutionOptions,
    /// Extra random starts for the agreement check; 0 skips it.
    #[serde(default)]
    starts: usize,
    #[serde(default)]
    start_seed: u64,
    #[serde(default = "default_agree_tol")]
    agree_tol: f64,
}

fn default_agree_tol() -> f64 {
    1e-6
}

fn trace_table(sol: &StateEvolutionSolution) -> Table<'static> {
    let mut t = Table::new(&["iteration", "phase", "beta", "gamma", "eq1_residual", "eq2_residual"]);
    for r in &sol.trace {
        let phase = match r.phase {
            Phase::FixedPoint => "fixed_point",
            Phase::Newton => "newton",
        };
        t.push(row([u(r.iteration), phase.into(), f(r.beta), f(r.gamma), f(r.eq1_residual), f(r.eq2_residual)]));
    }
    t
}

pub fn statepoint_solve(io: &Io) -> Result<Status> {
    let cfg: StatepointConfig = read_config(&io.config)?;
    let sol = solve_state_evolution(&cfg.input, &cfg.options)?;
    let starts = if cfg.starts > 0 {
        Some(multi_start(&cfg.input, &cfg.options, cfg.starts, cfg.start_seed, cfg.agree_tol)?)
    } else {
        None
    };
    let out = OutDir::create(&io.out)?;
    let mut samples = Table::new(&["start", "beta_init", "gamma_init", "beta_star", "gamma_star"]);
    if let Some(ms) = &starts {
        for (i, (s, x)) in ms.starts.iter().zip(&ms.solutions).enumerate() {
            samples.push(row([u(i + 1), f(s[0]), f(s[1]), f(x[0]), f(x[1])]));
        }
    }
    let result = json!({ "input": cfg.input, "solution": sol, "multi_start": starts });
    out.write(&result, &samples, &trace_table(&sol))?;
    if !sol.converged {
        return Ok(Status::NotConverged(format!(
            "fixed point stopped with residuals ({:e}, {:e})",
            sol.eq1_residual, sol.eq2_residual
        )));
    }
    if let Some(ms) = starts.filter(|m| !m.agree) {
        return Ok(Status::NotConverged(format!("random starts disagree by {:e}", ms.max_disagreement)));
    }
    Ok(Status::Ok)
}

pub fn universality_run(io: &Io) -> Result<Status> {
    let cfg: ExperimentConfig = read_config(&io.config)?;
    let res = run_universality(&cfg)?;
    let out = OutDir::create(&io.out)?;
    let mut samples = Table::new(&[
        "replication",
        "objective_x",
        "objective_g",
        "error_x",
        "error_g",
        "sup_norm_x",
        "sup_norm_g",
        "first_coordinate_x",
        "first_coordinate_g",
        "converged_x",
        "converged_g",
    ]);
    let mut trace = Table::new(&["replication", "iterations_x", "iterations_g", "kkt_x", "kkt_g"]);
    for r in &res.records {
        let (x, g) = (&r.x_arm, &r.g_arm);
        samples.push(row([
            u(r.replication),
            f(x.objective),
            f(g.objective),
            f(x.error),
            f(g.error),
            f(x.sup_norm),
            f(g.sup_norm),
            f(x.first_coordinate),
            f(g.first_coordinate),
            x.converged.into(),
            g.converged.into(),
        ]));
        trace.push(row([u(r.replication), u(x.iterations), u(g.iterations), f(x.kkt_residual), f(g.kkt_residual)]));
    }
    out.write(&json!({ "config": cfg, "result": res }), &samples, &trace)?;
    Ok(if res.within_exclusion_budget {
        Status::Ok
    } else {
        Status::NotConverged(format!("{} of {} replications did not converge", res.excluded, res.replications))
    })
}

#[derive(Deserialize, Serialize)]
struct ConvergenceConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    #[serde(default)]
    state_evolution: StateEvolutionOptions,
}

pub fn convergence_run(io: &Io) -> Result<Status> {
    let cfg: ConvergenceConfig = read_config(&io.config)?;
    let rep = run_error_convergence(&cfg.experiment, &cfg.state_evolution)?;
    let out = OutDir::create(&io.out)?;
    let mut samples = Table::new(&["replication", "error", "objective", "iterations", "kkt_residual", "converged"]);
    for (r, a) in &rep.records {
        samples.push(row([u(*r), f(a.error), f(a.objective), u(a.iterations), f(a.kkt_residual), a.converged.into()]));
    }
    let se_input = state_evolution_input(&cfg.experiment);
    out.write(
        &json!({ "config": cfg, "state_evolution_input": se_input, "report": rep }),
        &samples,
        &trace_table(&rep.state_evolution),
    )?;
    Ok(if rep.within_exclusion_budget {
        Status::Ok
    } else {
        Status::NotConverged(format!("{} of {} replications did not converge", rep.excluded, rep.replications))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TelescopeConfig {
    n: usize,
    partition: Partition,
    function: PathFunction,
    #[serde(default = "one")]
    paths: usize,
    seed: u64,
    #[serde(default = "default_rel_tol")]
    rel_tol: f64,
}

fn one() -> usize {
    1
}

fn default_rel_tol() -> f64 {
    1e-10
}

pub fn lindeberg_telescope(io: &Io) -> Result<Status> {
    let cfg: TelescopeConfig = read_config(&io.config)?;
    if cfg.n == 0 || cfg.paths == 0 {
        return Err(Error::InvalidSpec("n and paths must be positive".into()));
    }
    let func = cfg.function.build(cfg.n, cfg.partition.p())?;
    let mut samples = Table::new(&["path", "f_x", "f_w", "increments", "residual", "scale", "within"]);
    let mut worst: f64 = 0.0;
    let mut all_within = true;
    for r in 0..cfg.paths {
        let path = random_path(cfg.n, cfg.partition.clone(), cfg.seed, r as u64)?;
        let t = telescoping_check(&path, &*func);
        let ok = t.within(cfg.rel_tol);
        all_within &= ok;
        worst = worst.max(t.residual / t.scale);
        samples.push(row([u(r), f(t.f_x), f(t.f_w), f(t.increments), f(t.residual), f(t.scale), ok.into()]));
    }
    let out = OutDir::create(&io.out)?;
    let result = json!({
        "paths": cfg.paths, "function": cfg.function, "max_relative_residual": worst,
        "rel_tol": cfg.rel_tol, "all_within": all_within,
    });
    out.write(&result, &samples, &Table::new(&["step"]))?;
    Ok(Status::Ok)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GapConfig {
    design_a: DesignSpec,
    design_b: DesignSpec,
    function: PathFunction,
    replications: usize,
    seed: u64,
}

pub fn lindeberg_gap(io: &Io) -> Result<Status> {
    let cfg: GapConfig = read_config(&io.config)?;
    let func = cfg.function.build(cfg.design_a.n, cfg.design_a.p)?;
    let gap = mc_gap(&cfg.design_a, &cfg.design_b, &*func, cfg.replications, cfg.seed)?;
    let out = OutDir::create(&io.out)?;
    let result = json!({ "function": cfg.function, "gap": gap, "within_3_se": gap.within_se(3.0) });
    out.write(&result, &Table::new(&["replication"]), &Table::new(&["step"]))?;
    Ok(Status::Ok)
}
