//! Block-dependent random designs, robust ridge ERM and the tools to compare
//! them with their Gaussian analogues: cell merging, design sampling, losses
//! and proximal maps, solvers, Lindeberg swap paths, the state-evolution
//! fixed point and a replicated experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod harness;
pub mod lindeberg;
pub mod losses;
pub mod partition;
pub mod quadrature;
pub mod rng;
pub mod solver;
pub mod statepoint;

pub use nalgebra::{DMatrix, DVector};

pub use design::{BlockModel, CovarianceSpec, DesignSampler, DesignSpec, Family, Sigma};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RateReport, UniversalityResult};
pub use lindeberg::SwapPath;
pub use losses::{LossKind, LossProfile, SmoothedLoss};
pub use partition::{AlignedPartition, Partition, ValidationReport};
pub use solver::{NoiseSpec, PenaltyScale, ProblemInstance, RegressionData, Solution, SolverOptions, Theta0Spec};
pub use statepoint::{StateEvolutionInput, StateEvolutionOptions, StateEvolutionSolution};
