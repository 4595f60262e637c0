//! Small-ball probabilities and fine-scale behaviour of the stochastic heat
//! equation on the circle: covariance kernels, exact path samplers, a
//! finite-difference solver, rare-event estimators, the deterministic
//! asymptotics and a reproducible experiment runner.

pub mod asymptotics;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod kernels;
pub mod quadrature;
pub mod rng;
pub mod samplers;
pub mod smallball;
pub mod spde;
pub mod stats;

pub use error::{Error, Result};
pub use experiments::{ExperimentParams, ExperimentSpec};
pub use grid::TimeGrid;
pub use kernels::{CovKernel, DecompositionFit, ProcessKind, TorusPoint};
pub use rng::RngStream;
pub use samplers::{PathEnsemble, SpaceTimeEnsemble};
pub use smallball::{EstimateRecord, Kernel, ProcessSpec, SmallBallQuery, SplittingConfig};
pub use spde::{InitialCondition, Scheme, Sigma, SpdeConfig};
