//! Block-dependent random designs.
//!
//! Rows are i.i.d. Within cell `B_j` a row is `L_j ε` where `L_j` is the
//! Cholesky factor of the cell covariance and `ε` has i.i.d. standardized
//! entries from the chosen family; cells are drawn independently and the
//! whole matrix is scaled by `1/√n`. The Gaussian analogue uses the same
//! covariance with standard normal `ε`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::partition::Partition;
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockModel {
    Identity,
    /// Unit variances, common correlation `rho` inside each cell.
    Equicorrelated { rho: f64 },
    /// One symmetric positive definite matrix per cell, row-major.
    Explicit { blocks: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub partition: Partition,
    pub block_model: BlockModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Rademacher,
    Uniform,
    CenteredExponential,
    StudentT { nu: f64 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Rademacher => "rademacher",
            Family::Uniform => "uniform",
            Family::CenteredExponential => "centered_exponential",
            Family::StudentT { .. } => "student_t",
        }
    }

    /// One draw with mean 0 and variance 1.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::Gaussian => rng.sample(StandardNormal),
            Family::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::Uniform => (rng.random::<f64>() - 0.5) * 12f64.sqrt(),
            Family::CenteredExponential => {
                let e: f64 = rng.sample(Exp1);
                e - 1.0
            }
            Family::StudentT { nu } => {
                let t: f64 = StudentT::new(nu).expect("validated nu").sample(rng);
                t / (nu / (nu - 2.0)).sqrt()
            }
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n: usize,
    pub p: usize,
    pub covariance: CovarianceSpec,
    pub family: Family,
    /// Permits Student-t degrees of freedom below the moment requirement.
    #[serde(default)]
    pub allow_heavy_tails: bool,
    /// Multiplies the non-Gaussian design only. Any value other than 1
    /// breaks second-moment matching with the Gaussian analogue; it exists
    /// for positive-control experiments.
    #[serde(default = "default_scale")]
    pub entry_scale: f64,
}

impl DesignSpec {
    pub fn new(n: usize, covariance: CovarianceSpec, family: Family) -> Self {
        DesignSpec {
            n,
            p: covariance.partition.p(),
            covariance,
            family,
            allow_heavy_tails: false,
            entry_scale: 1.0,
        }
    }

    /// Identity covariance over contiguous cells of size `block`.
    pub fn identity(n: usize, p: usize, block: usize, family: Family) -> Self {
        Self::new(
            n,
            CovarianceSpec {
                partition: Partition::contiguous(p, block),
                block_model: BlockModel::Identity,
            },
            family,
        )
    }

    /// Dependence parameter `d`: the largest cell.
    pub fn d(&self) -> usize {
        self.covariance.partition.max_cell_size()
    }

    /// Proportionality constant `τ = min(p/n, n/p)`, so `τ <= p/n <= 1/τ`.
    pub fn tau(&self) -> f64 {
        let ratio = self.p as f64 / self.n as f64;
        ratio.min(1.0 / ratio)
    }

    /// Structural checks; with a loss, also the moment condition for
    /// Student-t entries (`ν` above `2^{(q̄₀+4)/2}`).
    pub fn validate(&self, loss: Option<&LossKind>) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::spec("n and p must be positive"));
        }
        let part = &self.covariance.partition;
        if part.p() != self.p {
            return Err(Error::spec(format!(
                "partition covers p = {} but design has p = {}",
                part.p(),
                self.p
            )));
        }
        let report = part.validate(part.max_cell_size().max(1));
        if !report.valid {
            return Err(Error::InvalidPartition(report));
        }
        if !(self.entry_scale > 0.0 && self.entry_scale.is_finite()) {
            return Err(Error::spec("entry_scale must be positive"));
        }
        match &self.covariance.block_model {
            BlockModel::Identity => {}
            BlockModel::Equicorrelated { rho } => {
                for (j, cell) in part.cells().iter().enumerate() {
                    let b = cell.len();
                    if b >= 2 && !(*rho < 1.0 && *rho > -1.0 / (b as f64 - 1.0)) {
                        return Err(Error::spec(format!(
                            "equicorrelation {rho} outside (-1/{}, 1) for cell {}",
                            b - 1,
                            j + 1
                        )));
                    }
                }
            }
            BlockModel::Explicit { blocks } => {
                if blocks.len() != part.num_cells() {
                    return Err(Error::spec("one explicit block per cell is required"));
                }
                for (j, (blk, cell)) in blocks.iter().zip(part.cells()).enumerate() {
                    let b = cell.len();
                    if blk.len() != b || blk.iter().any(|row| row.len() != b) {
                        return Err(Error::spec(format!("block {} must be {b}x{b}", j + 1)));
                    }
                    let asymmetric = (0..b)
                        .flat_map(|r| (0..r).map(move |c| (r, c)))
                        .any(|(r, c)| (blk[r][c] - blk[c][r]).abs() > 1e-12 * (1.0 + blk[r][c].abs()));
                    if asymmetric {
                        return Err(Error::spec(format!("block {} is not symmetric", j + 1)));
                    }
                }
            }
        }
        if let Family::StudentT { nu } = self.family {
            if !(nu > 2.0) {
                return Err(Error::spec(format!("student_t needs nu > 2 for unit variance, got {nu}")));
            }
            if let Some(loss) = loss {
                let q_star = loss.profile().moment_order();
                if nu <= q_star && !self.allow_heavy_tails {
                    return Err(Error::spec(format!(
                        "student_t nu = {nu} lacks moments of order {q_star} required for the {} loss",
                        loss.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Block-diagonal covariance with cached Cholesky factors.
#[derive(Clone, Debug)]
pub struct Sigma {
    partition: Partition,
    blocks: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
    identity: bool,
    pub lambda_max: f64,
}

impl Sigma {
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let p = self.partition.p();
        let mut out = DMatrix::zeros(p, p);
        for (cell, blk) in self.partition.cells().iter().zip(&self.blocks) {
            for (a, &ia) in cell.iter().enumerate() {
                for (b, &ib) in cell.iter().enumerate() {
                    out[(ia, ib)] = blk[(a, b)];
                }
            }
        }
        out
    }
}

pub fn build_sigma(spec: &CovarianceSpec) -> Result<Sigma> {
    let part = &spec.partition;
    let report = part.validate(part.max_cell_size().max(1));
    if !report.valid {
        return Err(Error::InvalidPartition(report));
    }
    let mut blocks = Vec::with_capacity(part.num_cells());
    for (j, cell) in part.cells().iter().enumerate() {
        let b = cell.len();
        let blk = match &spec.block_model {
            BlockModel::Identity => DMatrix::identity(b, b),
            BlockModel::Equicorrelated { rho } => {
                if b >= 2 && !(*rho < 1.0 && *rho > -1.0 / (b as f64 - 1.0)) {
                    return Err(Error::NotPositiveDefinite { block: j });
                }
                DMatrix::from_fn(b, b, |r, c| if r == c { 1.0 } else { *rho })
            }
            BlockModel::Explicit { blocks } => {
                let src = blocks
                    .get(j)
                    .ok_or_else(|| Error::spec("one explicit block per cell is required"))?;
                if src.len() != b || src.iter().any(|row| row.len() != b) {
                    return Err(Error::spec(format!("block {} must be {b}x{b}", j + 1)));
                }
                DMatrix::from_fn(b, b, |r, c| src[r][c])
            }
        };
        blocks.push(blk);
    }
    let identity = matches!(spec.block_model, BlockModel::Identity);
    let mut factors = Vec::with_capacity(blocks.len());
    for (j, blk) in blocks.iter().enumerate() {
        factors.push(cholesky_with_jitter(blk).ok_or(Error::NotPositiveDefinite { block: j })?);
    }
    let lambda_max = blocks.iter().map(power_iteration).fold(0.0, f64::max);
    Ok(Sigma {
        partition: part.clone(),
        blocks,
        factors,
        identity,
        lambda_max,
    })
}

/// Lower Cholesky factor; retries once with `1e-12 trace / b` on the diagonal.
fn cholesky_with_jitter(blk: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = blk.clone().cholesky() {
        return Some(ch.l());
    }
    let b = blk.nrows();
    let jitter = 1e-12 * blk.trace() / b as f64;
    if !(jitter > 0.0) {
        return None;
    }
    let shifted = blk + DMatrix::identity(b, b) * jitter;
    shifted.cholesky().map(|ch| ch.l())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// Rayleigh-quotient stopping rule.
pub fn power_iteration(a: &DMatrix<f64>) -> f64 {
    let b = a.nrows();
    if b == 0 {
        return 0.0;
    }
    // Asymmetric start so it is not orthogonal to the top eigenvector of
    // equicorrelated blocks with negative correlation.
    let mut v = DVector::from_fn(b, |i, _| 1.0 + 0.37 * (i as f64 + 1.0).sin() + 0.01 * i as f64);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..100_000 {
        let av = a * &v;
        let next = v.dot(&av);
        let norm = av.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = av / norm;
        if (next - estimate).abs() <= 1e-15 * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Pre-factored sampler for one design specification.
#[derive(Clone, Debug)]
pub struct DesignSampler {
    spec: DesignSpec,
    sigma: Sigma,
}

impl DesignSampler {
    pub fn new(spec: &DesignSpec) -> Result<Self> {
        spec.validate(None)?;
        let sigma = build_sigma(&spec.covariance)?;
        Ok(DesignSampler { spec: spec.clone(), sigma })
    }

    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    pub fn sigma(&self) -> &Sigma {
        &self.sigma
    }

    /// Draws the design with the spec's family and entry scale.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        self.draw(self.spec.family, self.spec.entry_scale, rng)
    }

    /// Draws the Gaussian analogue `N(0, Σ/n)` rows.
    pub fn sample_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        self.draw(Family::Gaussian, 1.0, rng)
    }

    fn draw<R: Rng + ?Sized>(&self, family: Family, scale: f64, rng: &mut R) -> DMatrix<f64> {
        let n = self.spec.n;
        let p = self.spec.p;
        let factor = scale / (n as f64).sqrt();
        let mut x = DMatrix::zeros(n, p);
        let max_b = self.sigma.partition.max_cell_size();
        let mut eps = vec![0.0; max_b];
        for i in 0..n {
            for (cell, l) in self.sigma.partition.cells().iter().zip(&self.sigma.factors) {
                let b = cell.len();
                for e in eps.iter_mut().take(b) {
                    *e = family.draw(rng);
                }
                if self.sigma.identity {
                    for (k, &col) in cell.iter().enumerate() {
                        x[(i, col)] = factor * eps[k];
                    }
                } else {
                    for (r, &col) in cell.iter().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..=r {
                            acc += l[(r, c)] * eps[c];
                        }
                        x[(i, col)] = factor * acc;
                    }
                }
            }
        }
        x
    }
}

pub fn sample_design(spec: &DesignSpec, seed: u64) -> Result<DMatrix<f64>> {
    let sampler = DesignSampler::new(spec)?;
    Ok(sampler.sample(&mut rng::stream(seed, 0, Purpose::Design)))
}

pub fn gaussian_analogue(spec: &DesignSpec, seed: u64) -> Result<DMatrix<f64>> {
    let sampler = DesignSampler::new(spec)?;
    Ok(sampler.sample_gaussian(&mut rng::stream(seed, 0, Purpose::Gaussian)))
}

/// Empirical first/second moment diagnostics of a design against `Σ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub n: usize,
    pub p: usize,
    /// `max_j |mean_i X⁰_ij|`.
    pub max_abs_mean: f64,
    /// `max_j sd(X⁰_j) / √n`.
    pub mean_se_scale: f64,
    /// `max_jk |M_jk - Σ_jk|` with `M = X⁰ᵀX⁰ / n = n XᵀX / n`
    /// (zero mean is known, so moments are uncentered).
    pub max_cov_deviation: f64,
    /// Largest per-entry standard error of `M_jk`.
    pub cov_se_scale: f64,
    /// `max_jk |M_jk - Σ_jk| / se_jk`.
    pub max_cov_z: f64,
    /// Same, restricted to pairs in different cells (when a partition is given).
    pub max_off_block_z: Option<f64>,
    /// Same, restricted to pairs in the same cell.
    pub max_in_block_z: Option<f64>,
}

pub fn empirical_moment_check(
    x: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    partition: Option<&Partition>,
) -> Result<MomentReport> {
    let (n, p) = x.shape();
    if sigma.shape() != (p, p) {
        return Err(Error::arg(format!(
            "sigma is {}x{} but design has p = {p}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::arg("design has no rows"));
    }
    let nf = n as f64;
    let x0 = x * nf.sqrt();
    let mut max_abs_mean: f64 = 0.0;
    let mut mean_se_scale: f64 = 0.0;
    for j in 0..p {
        let col = x0.column(j);
        let mean = col.sum() / nf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        max_abs_mean = max_abs_mean.max(mean.abs());
        mean_se_scale = mean_se_scale.max((var / nf).sqrt());
    }
    let second = x0.tr_mul(&x0) / nf;
    let sq = x0.map(|v| v * v);
    let fourth = sq.tr_mul(&sq) / nf;

    let cell_of = partition.map(|part| {
        let mut owner = vec![usize::MAX; p];
        for (c, cell) in part.cells().iter().enumerate() {
            for &i in cell {
                if i < p {
                    owner[i] = c;
                }
            }
        }
        owner
    });

    let mut max_cov_deviation: f64 = 0.0;
    let mut cov_se_scale: f64 = 0.0;
    let mut max_cov_z: f64 = 0.0;
    let mut off: f64 = 0.0;
    let mut within: f64 = 0.0;
    for j in 0..p {
        for k in 0..p {
            let dev = (second[(j, k)] - sigma[(j, k)]).abs();
            let var = (fourth[(j, k)] - second[(j, k)] * second[(j, k)]).max(0.0);
            let se = (var / nf).sqrt();
            let z = if dev <= 1e-12 * (1.0 + sigma[(j, k)].abs()) {
                0.0
            } else if se > 0.0 {
                dev / se
            } else {
                f64::INFINITY
            };
            max_cov_deviation = max_cov_deviation.max(dev);
            cov_se_scale = cov_se_scale.max(se);
            max_cov_z = max_cov_z.max(z);
            if let Some(owner) = &cell_of {
                if owner[j] == owner[k] {
                    within = within.max(z);
                } else {
                    off = off.max(z);
                }
            }
        }
    }
    Ok(MomentReport {
        n,
        p,
        max_abs_mean,
        mean_se_scale,
        max_cov_deviation,
        cov_se_scale,
        max_cov_z,
        max_off_block_z: cell_of.as_ref().map(|_| off),
        max_in_block_z: cell_of.as_ref().map(|_| within),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSidecar {
    pub n: usize,
    pub p: usize,
    pub family: String,
    pub seed: u64,
}

/// Writes `X` as little-endian row-major f64 to `path` and the sidecar JSON
/// next to it (`<path>.json`).
pub fn write_design(path: &Path, x: &DMatrix<f64>, family: &str, seed: u64) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            out.write_all(&x[(i, j)].to_le_bytes())?;
        }
    }
    out.flush()?;
    let sidecar = DesignSidecar {
        n: x.nrows(),
        p: x.ncols(),
        family: family.to_string(),
        seed,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_design(path: &Path) -> Result<(DMatrix<f64>, DesignSidecar)> {
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let sidecar: DesignSidecar = serde_json::from_slice(&std::fs::read(side)?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != sidecar.n * sidecar.p * 8 {
        return Err(Error::spec("design file size does not match its sidecar"));
    }
    let x = DMatrix::from_fn(sidecar.n, sidecar.p, |i, j| {
        let at = 8 * (i * sidecar.p + j);
        f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
    });
    Ok((x, sidecar))
}
