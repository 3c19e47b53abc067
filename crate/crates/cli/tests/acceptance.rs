//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use blockdep::design::{empirical_moment_check, DesignSampler};
use blockdep::harness::{ks_statistic, run_error_convergence, run_universality, ExperimentConfig};
use blockdep::lindeberg::{random_path, telescoping_check, PathFunction};
use blockdep::quadrature::normal_rule;
use blockdep::rng::{self, Purpose};
use blockdep::solver::{erm_solve, soft_min, synth_data, ProblemInstance};
use blockdep::statepoint::{expectations, multi_start, solve_state_evolution, NoiseRule};
use blockdep::{
    BlockModel, CovarianceSpec, DMatrix, DVector, DesignSpec, Family, LossKind, NoiseSpec, Partition, PenaltyScale,
    SolverOptions, StateEvolutionInput, StateEvolutionOptions, Theta0Spec,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Criterion = (&'static str, fn() -> Verdict, Duration);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_partition<R: Rng>(p: usize, d: usize, rng: &mut R) -> Partition {
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(rng);
    let mut cells = Vec::new();
    let mut rest = &idx[..];
    while !rest.is_empty() {
        let size = rng.random_range(1..=d.min(rest.len()));
        cells.push(rest[..size].to_vec());
        rest = &rest[size..];
    }
    Partition::new(p, cells)
}

fn corpus() -> Vec<(Partition, usize)> {
    let mut rng = rng::stream(2024, 0, Purpose::Auxiliary);
    (0..1000)
        .map(|_| {
            let p = rng.random_range(8..=512);
            let d = rng.random_range(1..=32usize.min(p));
            (random_partition(p, d, &mut rng), d)
        })
        .collect()
}

fn c1_power_sums() -> Verdict {
    let mut worst: f64 = 0.0;
    for (part, d) in corpus() {
        let p = part.p() as u128;
        if part.power_sum(1).unwrap() != p {
            return verdict(false, format!("power_sum(1) != p for p = {p}"));
        }
        for m in 1..=6u32 {
            let s = part.power_sum(m).unwrap();
            let bound = 4 * p * (d as u128).pow(m - 1);
            if s > bound {
                return verdict(false, format!("p = {p}, d = {d}, m = {m}: {s} > {bound}"));
            }
            worst = worst.max(s as f64 / bound as f64);
        }
    }
    verdict(true, format!("1000 partitions, m = 1..6, max sum/bound = {worst:.4}"))
}

fn c2_merge() -> Verdict {
    let mut max_ratio: f64 = 0.0;
    for (part, d) in corpus() {
        let merged = part.merge_cells(d).unwrap();
        let threshold = d / 2 + 1;
        let mut used = vec![0usize; part.num_cells()];
        for (cell, group) in merged.cells.iter().zip(&merged.groups) {
            let mut union: Vec<usize> = group.iter().flat_map(|&j| part.cells()[j].iter().copied()).collect();
            let mut got = cell.clone();
            union.sort_unstable();
            got.sort_unstable();
            if union != got {
                return verdict(false, "aligned cell is not the union of its group");
            }
            for &j in group {
                used[j] += 1;
            }
        }
        if used.iter().any(|&c| c != 1) {
            return verdict(false, "source cells not used exactly once");
        }
        let small = merged.cells.iter().filter(|c| c.len() < threshold).count();
        if small > 1 {
            return verdict(false, format!("{small} small cells for d = {d}"));
        }
        let s = merged.cells.len() as f64;
        let bound = 4.0 * part.p() as f64 / d as f64;
        if s > bound {
            return verdict(false, format!("s = {s} > 4p/d = {bound}"));
        }
        max_ratio = max_ratio.max(s / bound);
    }
    verdict(true, format!("coarsening, <= 1 small cell, max s/(4p/d) = {max_ratio:.4}"))
}

fn c3_soft_min() -> Verdict {
    let mut rng = rng::stream(3, 0, Purpose::Auxiliary);
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let beta = 10f64.powf(rng.random_range(-2.0..3.0));
        let f = soft_min(&v, beta).unwrap();
        let m = v.iter().copied().fold(f64::INFINITY, f64::min);
        let slack = 1e-12 * (1.0 + m.abs() + (n as f64).ln() / beta);
        if f > m + slack || f < m - (n as f64).ln() / beta - slack {
            return verdict(false, format!("F = {f}, min = {m}, N = {n}, beta = {beta}"));
        }
    }
    verdict(true, "1000 vectors inside [min - ln N / beta, min]")
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-11 * (1.0 + a.abs() + b.abs()) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn c4_prox() -> Verdict {
    let losses = [LossKind::Squared, LossKind::Absolute, LossKind::Huber { eta: 1.0 }];
    let mut worst: f64 = 0.0;
    let mut worst_d: f64 = 0.0;
    for loss in losses {
        for i in 0..=40 {
            let x = -10.0 + 0.5 * i as f64;
            for lam in [0.1, 1.0, 10.0] {
                let p = loss.prox(x, lam).unwrap();
                // Every prox here lies between 0 and x; the bracket must hold
                // that segment (x ± (3λ + 3) alone misses -10/3 at x = -10, λ = 1).
                let oracle = golden_section(
                    |z| (x - z) * (x - z) / (2.0 * lam) + loss.value(z),
                    x.min(0.0) - 3.0 * lam - 3.0,
                    x.max(0.0) + 3.0 * lam + 3.0,
                );
                worst = worst.max((p - oracle).abs());
                let kink = match loss {
                    LossKind::Squared => None,
                    LossKind::Absolute => Some(lam),
                    LossKind::Huber { eta } => Some(eta * (1.0 + lam)),
                };
                if kink.is_some_and(|k| (x.abs() - k).abs() < 1e-3) {
                    continue;
                }
                let h = 1e-6;
                let fd = (loss.prox(x + h, lam).unwrap() - loss.prox(x - h, lam).unwrap()) / (2.0 * h);
                worst_d = worst_d.max((fd - loss.prox_derivative(x, lam).unwrap().value).abs());
            }
        }
    }
    verdict(worst <= 1e-6 && worst_d <= 1e-4, format!("max |prox - golden| = {worst:.2e}, max |prox' - fd| = {worst_d:.2e}"))
}

fn c5_telescope() -> Verdict {
    let mut rng = rng::stream(5, 0, Purpose::Auxiliary);
    let mut worst: f64 = 0.0;
    for r in 0..100u64 {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=6usize);
        let k = rng.random_range(1..=3.min(p));
        let mut sizes = vec![1; k];
        for _ in k..p {
            let j = rng.random_range(0..k);
            sizes[j] += 1;
        }
        let part = Partition::from_sizes(&sizes);
        let path = random_path(n, part, 55, r).unwrap();
        let soft = PathFunction::SoftMinObjective {
            loss: LossKind::Huber { eta: 1.0 },
            lambda: 0.5,
            bound: 1.0,
            delta: 1.0,
            beta: 5.0,
            seed: r,
        };
        for f in [PathFunction::Sum, PathFunction::FrobeniusSq, soft] {
            let func = f.build(n, p).unwrap();
            let t = telescoping_check(&path, &*func);
            worst = worst.max(t.residual / t.scale);
        }
    }
    verdict(worst <= 1e-10, format!("100 paths x 3 functions, max residual/scale = {worst:.2e}"))
}

fn c6_moments() -> Verdict {
    let spec = DesignSpec::new(
        2000,
        CovarianceSpec { partition: Partition::contiguous(200, 4), block_model: BlockModel::Equicorrelated { rho: 0.3 } },
        Family::Rademacher,
    );
    let sampler = DesignSampler::new(&spec).unwrap();
    let x = sampler.sample(&mut rng::stream(6, 0, Purpose::Design));
    let r = empirical_moment_check(&x, &sampler.sigma().dense(), Some(sampler.sigma().partition())).unwrap();
    let off = r.max_off_block_z.unwrap_or(f64::INFINITY);
    verdict(r.max_cov_z <= 5.0 && off <= 5.0, format!("max z all entries = {:.2}, cross-cell = {off:.2}", r.max_cov_z))
}

fn c7_ridge() -> Verdict {
    let mut worst: f64 = 0.0;
    for (r, (n, p)) in [(60, 20), (100, 50), (40, 50), (200, 10)].into_iter().enumerate() {
        for penalty in [PenaltyScale::Plain, PenaltyScale::SampleNormalized] {
            let spec = DesignSpec::identity(n, p, 2, Family::Uniform);
            let sampler = DesignSampler::new(&spec).unwrap();
            let data = synth_data(
                &sampler,
                &Theta0Spec::Gaussian { variance: 1.0 },
                &NoiseSpec::Gaussian { variance: 1.0 },
                7,
                r as u64,
            )
            .unwrap();
            let inst = ProblemInstance::new(data, 0.5, LossKind::Squared).with_penalty(penalty);
            let sol = erm_solve(&inst, &SolverOptions { tol: 1e-12, max_iter: 200_000 }).unwrap();
            let x = &inst.data.x;
            let mu = inst.ridge();
            let nf = n as f64;
            let a = x.transpose() * x * (2.0 / nf) + DMatrix::<f64>::identity(p, p) * mu;
            let b: DVector<f64> = x.transpose() * &inst.data.xi * (2.0 / nf) - &inst.data.theta0 * mu;
            let w = a.lu().solve(&b).unwrap();
            worst = worst.max((&sol.w_hat - w).amax());
        }
    }
    verdict(worst <= 1e-8, format!("max |w_fista - w_normal_eq| = {worst:.2e}"))
}

fn c8_state_evolution() -> Verdict {
    let opts = StateEvolutionOptions::default();
    // Scalar reduction of the squared-loss system.
    let mut oracle_gap: f64 = 0.0;
    for (tau0, lambda, s2, m2) in [(2.0, 0.5, 1.0, 1.0), (4.0, 0.1, 0.25, 2.0), (1.5, 2.0, 1.0, 0.5)] {
        let input = StateEvolutionInput {
            tau0,
            lambda,
            loss: LossKind::Squared,
            noise: NoiseSpec::Gaussian { variance: s2 },
            pi0_second_moment: m2,
        };
        let s = solve_state_evolution(&input, &opts).unwrap();
        let k = 1.0 / tau0;
        let (a, b, c) = (2.0 * lambda, lambda + 2.0 - 2.0 * k, -k);
        let beta = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        let cc = 2.0 * beta / (1.0 + 2.0 * beta);
        let gamma = ((cc * cc * s2 + lambda * lambda * beta * beta * m2) / (k - cc * cc)).sqrt();
        oracle_gap = oracle_gap.max((s.beta_star - beta).abs()).max((s.gamma_star - gamma).abs());
    }
    // Node doubling at the solution, plus agreement with the exact Gaussian fold.
    let mut doubling: f64 = 0.0;
    let mut disagreement: f64 = 0.0;
    for loss in [LossKind::Squared, LossKind::Absolute, LossKind::Huber { eta: 1.0 }] {
        let input = StateEvolutionInput {
            tau0: 2.0,
            lambda: 0.5,
            loss,
            noise: NoiseSpec::Gaussian { variance: 1.0 },
            pi0_second_moment: 1.0,
        };
        let s = solve_state_evolution(&input, &opts).unwrap();
        let r64 = NoiseRule::gauss_hermite(1.0, 64).unwrap();
        let r128 = NoiseRule::gauss_hermite(1.0, 128).unwrap();
        let exact = NoiseRule::new(&input.noise, &opts).unwrap();
        let e64 = expectations(&loss, &r64, s.gamma_star, s.beta_star).unwrap();
        let e128 = expectations(&loss, &r128, s.gamma_star, s.beta_star).unwrap();
        let ex = expectations(&loss, &exact, s.gamma_star, s.beta_star).unwrap();
        doubling = doubling
            .max((e64.residual_sq - e128.residual_sq).abs())
            .max((e64.prox_derivative - e128.prox_derivative).abs())
            .max((ex.residual_sq - e128.residual_sq).abs())
            .max((ex.prox_derivative - e128.prox_derivative).abs());
        let ms = multi_start(&input, &opts, 5, 8, 1e-6).unwrap();
        if !ms.all_converged {
            return verdict(false, format!("{} start failed to converge", loss.name()));
        }
        disagreement = disagreement.max(ms.max_disagreement);
    }
    verdict(
        oracle_gap <= 1e-8 && doubling <= 1e-8 && disagreement <= 1e-6,
        format!("analytic gap = {oracle_gap:.2e}, doubling = {doubling:.2e}, 5-start spread = {disagreement:.2e}"),
    )
}

fn experiment(n: usize, family: Family, block_model: BlockModel, loss: LossKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        design: DesignSpec::new(
            n,
            CovarianceSpec { partition: Partition::contiguous(n / 2, 2), block_model },
            family,
        ),
        loss,
        lambda: 0.5,
        penalty_scale: PenaltyScale::SampleNormalized,
        theta0: Theta0Spec::Gaussian { variance: 1.0 },
        noise: NoiseSpec::Gaussian { variance: 1.0 },
        replications: 200,
        seed,
        solver: SolverOptions::default(),
    }
}

fn c9_prediction() -> Verdict {
    let mut cfg = experiment(3000, Family::Rademacher, BlockModel::Identity, LossKind::Huber { eta: 1.0 }, 9);
    cfg.replications = 20;
    let r = run_error_convergence(&cfg, &StateEvolutionOptions::default()).unwrap();
    verdict(
        r.relative_gap <= 0.10 && r.within_exclusion_budget,
        format!(
            "simulated {:.5} +- {:.5}, predicted {:.5}, relative gap {:.4}",
            r.mean_error, r.standard_error, r.predicted_error, r.relative_gap
        ),
    )
}

fn c10_trend() -> Verdict {
    let mut gaps = Vec::new();
    let mut within = true;
    let mut ks_800 = f64::NAN;
    let mut parts = Vec::new();
    for n in [200, 400, 800] {
        let cfg = experiment(n, Family::Rademacher, BlockModel::Equicorrelated { rho: 0.3 }, LossKind::Squared, 10);
        let r = run_universality(&cfg).unwrap();
        if !r.within_exclusion_budget {
            return verdict(false, format!("n = {n}: {} replications excluded", r.excluded));
        }
        let g = r.objective_mean_gap;
        gaps.push(g.gap.abs());
        within &= g.within_se(3.0);
        parts.push(format!("n={n}: {:.2e} (se {:.1e})", g.gap, g.standard_error));
        if n == 800 {
            ks_800 = r.ks_objective;
        }
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    verdict(
        (decreasing || within) && ks_800 <= 0.15,
        format!("{}; decreasing = {decreasing}, all within 3 se = {within}, KS(800) = {ks_800:.3}", parts.join(", ")),
    )
}

fn c11_positive_control() -> Verdict {
    let mut cfg = experiment(400, Family::Rademacher, BlockModel::Equicorrelated { rho: 0.3 }, LossKind::Squared, 11);
    cfg.design.entry_scale = 2f64.sqrt();
    cfg.penalty_scale = PenaltyScale::Plain;
    let r = run_universality(&cfg).unwrap();
    verdict(r.ks_objective >= 0.5, format!("KS of minimized objectives = {:.3}", r.ks_objective))
}

fn run_cli(args: &[&str], config: &Path, out: &Path, threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_blockdep"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("BLOCKDEP_THREADS", threads)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    !names.is_empty() && names.iter().all(|n| fs::read(a.join(n)).ok() == fs::read(b.join(n)).ok())
}

fn c12_reproducible() -> Verdict {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut small = experiment(200, Family::Rademacher, BlockModel::Equicorrelated { rho: 0.3 }, LossKind::Squared, 12);
    small.replications = 40;
    let small_path = tmp.path().join("universality_small.json");
    fs::write(&small_path, serde_json::to_string(&small).unwrap()).unwrap();
    let mut conv = experiment(400, Family::Rademacher, BlockModel::Identity, LossKind::Huber { eta: 1.0 }, 12);
    conv.replications = 8;
    let conv_path = tmp.path().join("convergence_small.json");
    fs::write(&conv_path, serde_json::to_string(&conv).unwrap()).unwrap();

    let cases: Vec<(Vec<&str>, std::path::PathBuf)> = vec![
        (vec!["partition", "merge"], configs.join("partition.json")),
        (vec!["design", "sample"], configs.join("design.json")),
        (vec!["solve"], configs.join("solve.json")),
        (vec!["statepoint", "solve"], configs.join("statepoint.json")),
        (vec!["lindeberg", "telescope"], configs.join("telescope.json")),
        (vec!["universality", "run"], small_path),
        (vec!["convergence", "run"], conv_path),
    ];
    let mut failed = Vec::new();
    for (i, (args, cfg)) in cases.iter().enumerate() {
        let a = tmp.path().join(format!("a{i}"));
        let b = tmp.path().join(format!("b{i}"));
        let ok = run_cli(args, cfg, &a, "1") && run_cli(args, cfg, &b, "3") && same_files(&a, &b);
        if !ok {
            failed.push(args.join(" "));
        }
    }
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} commands byte-identical across reruns (1 vs 3 threads)", cases.len())
        } else {
            format!("differs: {}", failed.join(", "))
        },
    )
}

fn main() {
    // Sanity for the rule used in criterion 8.
    let (x, w) = normal_rule(64, 1.0);
    assert!((x.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(ks_statistic(&[1.0], &[1.0]).unwrap() == 0.0);

    let criteria: Vec<Criterion> = vec![
        ("power-sum bound", c1_power_sums, Duration::from_secs(5)),
        ("merge postconditions", c2_merge, Duration::from_secs(5)),
        ("soft-min sandwich", c3_soft_min, Duration::from_secs(1)),
        ("prox oracle", c4_prox, Duration::from_secs(5)),
        ("telescoping identity", c5_telescope, Duration::from_secs(5)),
        ("moment matching", c6_moments, Duration::from_secs(30)),
        ("ridge closed form", c7_ridge, Duration::from_secs(10)),
        ("state-evolution oracle", c8_state_evolution, Duration::from_secs(30)),
        ("fixed-point prediction", c9_prediction, Duration::from_secs(600)),
        ("universality trend", c10_trend, Duration::from_secs(900)),
        ("positive control", c11_positive_control, Duration::from_secs(300)),
        ("reproducibility", c12_reproducible, Duration::from_secs(600)),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<24} {}  {} [{:.2}s, budget {}s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 12 passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
