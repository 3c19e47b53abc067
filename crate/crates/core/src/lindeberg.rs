//! Lindeberg swap paths between two designs.
//!
//! The path walks rows `0..n` in order and, within row `i`, replaces the
//! cells of `W_i` by the cells of `X_i` one at a time. `z(i, j)` is the
//! matrix after the first `j` cells of row `i` have been swapped, with rows
//! before `i` already from `X` and rows after `i` still from `W`. Consecutive
//! rows chain: `z(i, k) = z(i + 1, 0)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignSampler, DesignSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::partition::Partition;
use crate::rng::{self, Purpose};
use crate::solver::{discretize_box, objective, soft_min, ProblemInstance, RegressionData};

#[derive(Clone, Debug)]
pub struct SwapPath {
    x: DMatrix<f64>,
    w: DMatrix<f64>,
    partition: Partition,
}

/// Copy of `row` with entries outside `cell` set to zero.
pub fn masked_row(row: &DVector<f64>, cell: &[usize]) -> DVector<f64> {
    let mut out = DVector::zeros(row.len());
    for &j in cell {
        if j < row.len() {
            out[j] = row[j];
        }
    }
    out
}

impl SwapPath {
    pub fn new(x: DMatrix<f64>, w: DMatrix<f64>, partition: Partition) -> Result<Self> {
        if x.shape() != w.shape() {
            return Err(Error::arg("swap path endpoints must have equal shapes"));
        }
        if partition.p() != x.ncols() {
            return Err(Error::arg("partition does not cover the columns"));
        }
        let report = partition.validate(partition.max_cell_size().max(1));
        if !report.valid {
            return Err(Error::InvalidPartition(report));
        }
        Ok(SwapPath { x, w, partition })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.partition.num_cells()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::arg(format!("row {i} out of range 0..{}", self.n())));
        }
        Ok(())
    }

    fn stitched(&self, i: usize) -> DMatrix<f64> {
        let mut z = self.w.clone();
        for r in 0..i {
            z.set_row(r, &self.x.row(r));
        }
        z
    }

    /// `z(i, j)` for row `i ∈ 0..n` and `j ∈ 0..=k` swapped cells.
    pub fn z_matrix(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_row(i)?;
        if j > self.k() {
            return Err(Error::arg(format!("cell count {j} exceeds k = {}", self.k())));
        }
        let mut z = self.stitched(i);
        for cell in &self.partition.cells()[..j] {
            for &c in cell {
                z[(i, c)] = self.x[(i, c)];
            }
        }
        Ok(z)
    }

    /// `z⁰(i, j)` for `j ∈ 1..=k`: `z(i, j)` with cell `j` of row `i`
    /// emptied, so it carries neither the `X` nor the `W` values.
    pub fn z0_matrix(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        if j == 0 {
            return Err(Error::arg("z0 is defined for j >= 1"));
        }
        let mut z = self.z_matrix(i, j)?;
        for &c in &self.partition.cells()[j - 1] {
            z[(i, c)] = 0.0;
        }
        Ok(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TelescopeReport {
    pub f_x: f64,
    pub f_w: f64,
    /// `Σ_i Σ_j f(z(i, j)) - f(z(i, j - 1))`.
    pub increments: f64,
    pub residual: f64,
    /// `1 + |f(X)| + |f(W)|`.
    pub scale: f64,
}

impl TelescopeReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.residual <= rel_tol * self.scale
    }
}

/// Evaluates `f` along the whole path and compares the summed increments
/// with `f(X) - f(W)`.
pub fn telescoping_check(path: &SwapPath, f: &dyn Fn(&DMatrix<f64>) -> f64) -> TelescopeReport {
    let f_x = f(&path.x);
    let f_w = f(&path.w);
    let mut increments = 0.0;
    for i in 0..path.n() {
        let mut z = path.stitched(i);
        let mut prev = f(&z);
        for cell in path.partition.cells() {
            for &c in cell {
                z[(i, c)] = path.x[(i, c)];
            }
            let cur = f(&z);
            increments += cur - prev;
            prev = cur;
        }
    }
    TelescopeReport {
        f_x,
        f_w,
        increments,
        residual: (f_x - f_w - increments).abs(),
        scale: 1.0 + f_x.abs() + f_w.abs(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapEstimate {
    /// Mean of `f(A_r) - f(B_r)`.
    pub mean_difference: f64,
    pub gap: f64,
    pub standard_error: f64,
    pub replications: usize,
}

impl GapEstimate {
    /// `|gap| <= k · se`.
    pub fn within_se(&self, k: f64) -> bool {
        self.gap <= k * self.standard_error
    }
}

/// Monte Carlo estimate of `|E f(A) - E f(B)|` with paired streams: the two
/// designs of replication `r` are drawn from the same stream.
pub fn mc_gap(
    design_a: &DesignSpec,
    design_b: &DesignSpec,
    f: &(dyn Fn(&DMatrix<f64>) -> f64 + Sync),
    reps: usize,
    seed: u64,
) -> Result<GapEstimate> {
    if design_a.n != design_b.n || design_a.p != design_b.p || design_a.covariance != design_b.covariance {
        return Err(Error::arg("designs must share n, p and the covariance"));
    }
    if reps < 2 {
        return Err(Error::arg("need at least two replications"));
    }
    let a = DesignSampler::new(design_a)?;
    let b = DesignSampler::new(design_b)?;
    let diffs: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let xa = a.sample(&mut rng::stream(seed, r, Purpose::Design));
            let xb = b.sample(&mut rng::stream(seed, r, Purpose::Design));
            f(&xa) - f(&xb)
        })
        .collect();
    let m = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
    Ok(GapEstimate {
        mean_difference: mean,
        gap: mean.abs(),
        standard_error: (var / m).sqrt(),
        replications: reps,
    })
}

/// Random swap path with independent standard normal endpoints, drawn from
/// stream `replication`.
pub fn random_path(n: usize, partition: Partition, seed: u64, replication: u64) -> Result<SwapPath> {
    use rand_distr::{Distribution, StandardNormal};
    let p = partition.p();
    let mut rng = rng::stream(seed, replication, Purpose::Path);
    let mut draw = |_: usize, _: usize| -> f64 { StandardNormal.sample(&mut rng) };
    let x = DMatrix::from_fn(n, p, &mut draw);
    let w = DMatrix::from_fn(n, p, &mut draw);
    SwapPath::new(x, w, partition)
}

/// Named test functions for the CLI and experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathFunction {
    /// Sum of all entries.
    Sum,
    /// Squared Frobenius norm.
    FrobeniusSq,
    /// `Z[row, col]^power`, 0-based.
    Entry { row: usize, col: usize, power: i32 },
    /// Soft-min over the grid `{-bound, .., bound}^p` (spacing `delta`) of
    /// the ridge objective built on `Z`, with `θ₀` and `ξ` drawn from `seed`.
    SoftMinObjective {
        loss: LossKind,
        lambda: f64,
        bound: f64,
        delta: f64,
        beta: f64,
        seed: u64,
    },
}

pub type MatrixFn = Box<dyn Fn(&DMatrix<f64>) -> f64 + Sync + Send>;

impl PathFunction {
    /// Closure for `n × p` arguments.
    pub fn build(&self, n: usize, p: usize) -> Result<MatrixFn> {
        Ok(match *self {
            PathFunction::Sum => Box::new(|m: &DMatrix<f64>| m.sum()),
            PathFunction::FrobeniusSq => Box::new(|m: &DMatrix<f64>| m.norm_squared()),
            PathFunction::Entry { row, col, power } => {
                if row >= n || col >= p {
                    return Err(Error::arg(format!("entry ({row}, {col}) outside {n} x {p}")));
                }
                Box::new(move |m: &DMatrix<f64>| m[(row, col)].powi(power))
            }
            PathFunction::SoftMinObjective { loss, lambda, bound, delta, beta, seed } => {
                use rand_distr::{Distribution, StandardNormal};
                loss.validate()?;
                if !(lambda > 0.0 && beta > 0.0) {
                    return Err(Error::arg("lambda and beta must be positive"));
                }
                let grid = discretize_box(bound, delta, p)?;
                let mut rng = rng::stream(seed, 0, Purpose::Auxiliary);
                let theta0 = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                Box::new(move |m: &DMatrix<f64>| {
                    let data = RegressionData::new(m.clone(), theta0.clone(), xi.clone()).expect("shapes checked");
                    let inst = ProblemInstance::new(data, lambda, loss);
                    let values: Vec<f64> =
                        (0..grid.nrows()).map(|i| objective(&inst, &grid.row(i).transpose())).collect();
                    soft_min(&values, beta).expect("nonempty grid")
                })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SwapPath {
        SwapPath::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[10.0, 20.0]),
            Partition::singletons(2),
        )
        .unwrap()
    }

    #[test]
    fn masks() {
        let row = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(masked_row(&row, &[0, 1, 2]), row);
        assert_eq!(masked_row(&row, &[]), DVector::zeros(3));
        assert_eq!(masked_row(&row, &[1]), DVector::from_column_slice(&[0.0, 2.0, 0.0]));
    }

    #[test]
    fn hand_built_path_points() {
        let path = tiny();
        assert_eq!(path.z_matrix(0, 0).unwrap(), *path.w());
        assert_eq!(path.z_matrix(0, 1).unwrap(), DMatrix::from_row_slice(1, 2, &[1.0, 20.0]));
        assert_eq!(path.z_matrix(0, 2).unwrap(), *path.x());
        assert_eq!(path.z0_matrix(0, 2).unwrap(), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn out_of_range_indices() {
        let path = tiny();
        assert!(path.z_matrix(1, 0).is_err());
        assert!(path.z_matrix(0, 3).is_err());
        assert!(path.z0_matrix(0, 0).is_err());
    }

    #[test]
    fn linear_and_degenerate_telescopes() {
        let path = random_path(3, Partition::contiguous(4, 2), 1, 0).unwrap();
        let report = telescoping_check(&path, &|m| m.sum());
        assert!(report.residual <= 1e-12 * report.scale);
        let same = SwapPath::new(path.x().clone(), path.x().clone(), Partition::contiguous(4, 2)).unwrap();
        let report = telescoping_check(&same, &|m| m.norm_squared());
        assert_eq!(report.residual, 0.0);
        assert_eq!(report.increments, 0.0);
    }

    #[test]
    fn chain_and_endpoints() {
        let path = random_path(3, Partition::from_sizes(&[1, 2, 1]), 2, 0).unwrap();
        assert_eq!(path.z_matrix(0, 0).unwrap(), *path.w());
        assert_eq!(path.z_matrix(2, 3).unwrap(), *path.x());
        for i in 0..2 {
            assert_eq!(path.z_matrix(i, 3).unwrap(), path.z_matrix(i + 1, 0).unwrap());
        }
    }

    #[test]
    fn soft_min_objective_telescopes() {
        let path = random_path(3, Partition::contiguous(3, 2), 4, 0).unwrap();
        let f = PathFunction::SoftMinObjective {
            loss: LossKind::Huber { eta: 1.0 },
            lambda: 0.5,
            bound: 1.0,
            delta: 0.5,
            beta: 10.0,
            seed: 1,
        }
        .build(3, 3)
        .unwrap();
        assert!(telescoping_check(&path, &*f).within(1e-10));
    }

    #[test]
    fn frobenius_telescope() {
        let path = random_path(3, Partition::contiguous(4, 2), 5, 0).unwrap();
        assert_eq!(path.k(), 2);
        let report = telescoping_check(&path, &|m| m.norm_squared());
        assert!(report.within(1e-10));
    }
}
