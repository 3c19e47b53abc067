//! Experiment orchestration, rate formulas, distribution distances and
//! plain-text output.

mod experiment;
mod rates;
mod stats;

pub use experiment::{
    run_error_convergence, run_universality, state_evolution_input, ArmRecord, ConvergenceReport, ExperimentConfig,
    ReplicationRecord, UniversalityResult, MAX_EXCLUDED_FRACTION,
};
pub use rates::{admissible_d, omega_n, rate_report, sigma_n, AdmissibleD, RateReport};
pub use stats::{jackknife, ks_critical, ks_statistic, mean, paired_gap, variance, GapStat};

use crate::error::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "BLOCKDEP_THREADS";

/// Worker cap from `BLOCKDEP_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::spec(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` on a pool honoring `BLOCKDEP_THREADS`. Results do not depend on
/// the worker count.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::spec(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV table with a header; floats go through [`fmt_f64`].
pub fn write_csv<W: std::io::Write>(mut out: W, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
