//! Small-ball probability estimation.
//!
//! Probabilities `P{sup_window |X| <= eps}` are estimated either by plain
//! Monte Carlo or by adaptive multilevel splitting acting on the latent
//! Gaussian vector that drives the path.

mod chung;
mod fit;
pub mod gibbs;
mod min_grid;
pub mod models;
mod moderate;
mod plain;
mod splitting;

pub use chung::{chung_statistic, psi, ChungTable};
pub use fit::{fit_constant, ConstantFit, FitPoint};
pub use gibbs::PathLaw;
pub use min_grid::{
    dyadic_count, exponent_slope, min_grid_experiment, slowed_level, MinGridConfig, MinGridResult,
};
pub use models::{LatentModel, Work};
pub use moderate::{moderate_regime_estimate, ModerateRow, Phi};
pub use plain::{estimate_plain, plain_with_model};
pub use splitting::{estimate_splitting, split_law, split_model, Kernel, SplittingConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::CovKernel;
use crate::rng::RngStream;
use crate::samplers::{LocalizedField, LocalizedSpec};
use crate::spde::SpdeConfig;
use models::{
    localized_model, BrownianModel, CirculantModel, CoupledHModel, FactorModel, SpdeModel,
    TorusModel,
};

/// The process whose sup-norm is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    Bm,
    Fbm14,
    TAux {
        kappa: f64,
    },
    /// Free-space field at a point, from its fBm decomposition.
    HFree,
    /// Free-space field at a point, from a dense factorization of its kernel.
    HDense,
    ZTorus {
        modes: usize,
    },
    /// Localized field at one site; times and radii are in units of `t_n`
    /// (so the window is `[t_{n+1}/t_n, 1]` and radii are relative to `t_n^{1/4}`).
    Localized {
        field: LocalizedField,
        n: usize,
        alpha: f64,
    },
    /// Nonlinear field at cell `x_index`, optionally centered at `u0`.
    Spde {
        config: SpdeConfig,
        x_index: usize,
        centering: bool,
    },
}

/// `P{ sup over grid points in window of |X| <= epsilon }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallBallQuery {
    pub process: ProcessSpec,
    pub epsilon: f64,
    pub window: [f64; 2],
    /// Uniform grid points on `[0, window[1]]` (ignored for spde queries,
    /// which use the solver steps).
    pub points: usize,
}

impl SmallBallQuery {
    pub fn new(
        process: ProcessSpec,
        epsilon: f64,
        window: [f64; 2],
        points: usize,
    ) -> Result<Self> {
        let q = Self {
            process,
            epsilon,
            window,
            points,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.window[0] >= 0.0 && self.window[0] < self.window[1]) {
            return Err(Error::Domain(format!("invalid window {:?}", self.window)));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_points(&self, points: usize) -> Self {
        Self {
            points,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.window[1], self.points)
    }

    pub fn model(&self) -> Result<AnyModel> {
        self.validate()?;
        let model = match &self.process {
            ProcessSpec::Spde {
                config,
                x_index,
                centering,
            } => {
                if self.window[1] > config.horizon * (1.0 + 1e-12) {
                    return Err(Error::Domain(
                        "window extends past the solver horizon".into(),
                    ));
                }
                let times = config.times();
                let lo = times.partition_point(|&t| t < self.window[0] - 1e-12 * config.dt);
                let hi = times.partition_point(|&t| t <= self.window[1] + 1e-9 * config.dt);
                AnyModel::Spde(SpdeModel::new(config, *x_index, *centering, lo..hi)?)
            }
            ProcessSpec::Localized { field, n, alpha } => {
                let spec = LocalizedSpec::new(*field, *n, *alpha)?;
                AnyModel::Factor(localized_model(&spec, self.points)?)
            }
            process => {
                let grid = self.grid()?;
                let w = grid.window_indices(self.window[0], self.window[1]);
                match process {
                    ProcessSpec::Bm => AnyModel::Bm(BrownianModel::new(&grid, w)?),
                    ProcessSpec::Fbm14 => AnyModel::Circulant(CirculantModel::new(&grid, 0.25, w)?),
                    ProcessSpec::TAux { kappa } => AnyModel::Factor(FactorModel::from_kernel(
                        &CovKernel::TAux { kappa: *kappa },
                        &grid,
                        w,
                    )?),
                    ProcessSpec::HFree => AnyModel::CoupledH(CoupledHModel::new(&grid, w)?),
                    ProcessSpec::HDense => {
                        AnyModel::Factor(FactorModel::from_kernel(&CovKernel::HFree, &grid, w)?)
                    }
                    ProcessSpec::ZTorus { modes } => {
                        AnyModel::Torus(TorusModel::new(&grid, *modes, w)?)
                    }
                    _ => unreachable!("handled above"),
                }
            }
        };
        Ok(model)
    }
}

impl SmallBallQuery {
    /// The Gaussian law of the path values on the query grid.
    pub fn path_law(&self) -> Result<PathLaw> {
        self.validate()?;
        let kernel = match &self.process {
            ProcessSpec::Spde { .. } => {
                return Err(Error::Domain(
                    "the field solution is not Gaussian; use the pcn kernel".into(),
                ))
            }
            ProcessSpec::Localized { field, n, alpha } => {
                let spec = LocalizedSpec::new(*field, *n, *alpha)?;
                return PathLaw::dense(&spec.scaled_matrix(self.points)?, 0..self.points);
            }
            ProcessSpec::Bm => {
                let grid = self.grid()?;
                let w = grid.window_indices(self.window[0], self.window[1]);
                return PathLaw::brownian(&grid, w);
            }
            ProcessSpec::Fbm14 => CovKernel::FFbm14,
            ProcessSpec::TAux { kappa } => CovKernel::TAux { kappa: *kappa },
            ProcessSpec::HFree | ProcessSpec::HDense => CovKernel::HFree,
            ProcessSpec::ZTorus { modes } => CovKernel::ZTorus {
                x: 0.0,
                y: 0.0,
                modes: *modes,
            },
        };
        let grid = self.grid()?;
        let w = grid.window_indices(self.window[0], self.window[1]);
        PathLaw::dense(&kernel.matrix(grid.points())?, w)
    }
}

/// Closed set of latent models, so estimators can be monomorphic.
pub enum AnyModel {
    Bm(BrownianModel),
    Circulant(CirculantModel),
    Factor(FactorModel),
    CoupledH(CoupledHModel),
    Torus(TorusModel),
    Spde(SpdeModel),
}

impl LatentModel for AnyModel {
    fn latent_dim(&self) -> usize {
        match self {
            AnyModel::Bm(m) => m.latent_dim(),
            AnyModel::Circulant(m) => m.latent_dim(),
            AnyModel::Factor(m) => m.latent_dim(),
            AnyModel::CoupledH(m) => m.latent_dim(),
            AnyModel::Torus(m) => m.latent_dim(),
            AnyModel::Spde(m) => m.latent_dim(),
        }
    }

    fn score_capped(&self, z: &[f64], work: &mut Work, cap: f64) -> f64 {
        match self {
            AnyModel::Bm(m) => m.score_capped(z, work, cap),
            AnyModel::Circulant(m) => m.score_capped(z, work, cap),
            AnyModel::Factor(m) => m.score_capped(z, work, cap),
            AnyModel::CoupledH(m) => m.score_capped(z, work, cap),
            AnyModel::Torus(m) => m.score_capped(z, work, cap),
            AnyModel::Spde(m) => m.score_capped(z, work, cap),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plain,
    Splitting,
}

/// A probability estimate with a 95% interval, carried in log space as well
/// because splitting estimates routinely underflow.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub epsilon: f64,
    pub p_hat: f64,
    pub log_p: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub log_ci_lo: f64,
    pub log_ci_hi: f64,
    pub method: Method,
    pub n_effective: u64,
    /// Score evaluations (one per sampled or proposed path).
    pub cost: u64,
    /// Per-repetition log-estimates (splitting only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repetitions: Vec<f64>,
    /// Mean rejuvenation acceptance rate (splitting only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
}

impl EstimateRecord {
    pub fn log_half_width(&self) -> f64 {
        0.5 * (self.log_ci_hi - self.log_ci_lo)
    }

    pub const CSV_HEADER: &'static str =
        "epsilon,p_hat,ci_lo,ci_hi,log_p,log_ci_lo,log_ci_hi,method,cost";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.epsilon,
            self.p_hat,
            self.ci_lo,
            self.ci_hi,
            self.log_p,
            self.log_ci_lo,
            self.log_ci_hi,
            match self.method {
                Method::Plain => "plain",
                Method::Splitting => "splitting",
            },
            self.cost
        )
    }

    /// Whether two estimates' intervals overlap (in log space).
    pub fn overlaps(&self, other: &EstimateRecord) -> bool {
        self.log_ci_lo <= other.log_ci_hi && other.log_ci_lo <= self.log_ci_hi
    }
}

/// Grid-refinement study: the estimate on successively doubled grids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub points: Vec<usize>,
    pub records: Vec<EstimateRecord>,
    /// Relative change of `log_p` between the last two grids.
    pub last_change: f64,
    pub converged: bool,
    /// Richardson extrapolation of `log_p` from the last two grids.
    pub extrapolated_log_p: f64,
}

/// Double the grid until `log_p` moves by less than `tol` (relative), up to
/// `max_doublings` times. `rate` is the exponent of the grid bias in `dt`
/// used for the extrapolated value.
pub fn refine_estimate(
    query: &SmallBallQuery,
    cfg: &SplittingConfig,
    rng: RngStream,
    max_doublings: usize,
    tol: f64,
    rate: f64,
) -> Result<RefinementStudy> {
    let mut points = vec![query.points];
    let mut records = vec![estimate_splitting(query, cfg, rng.child(0))?];
    let mut last_change = f64::INFINITY;
    for d in 1..=max_doublings {
        let next = 2 * points[d - 1] - 1;
        let q = query.with_points(next);
        records.push(estimate_splitting(&q, cfg, rng.child(d as u64))?);
        points.push(next);
        let (a, b) = (records[d - 1].log_p, records[d].log_p);
        last_change = ((b - a) / b).abs();
        if last_change < tol {
            break;
        }
    }
    let k = records.len();
    let extrapolated_log_p = if k >= 2 {
        let f = 2f64.powf(rate);
        (f * records[k - 1].log_p - records[k - 2].log_p) / (f - 1.0)
    } else {
        records[0].log_p
    };
    Ok(RefinementStudy {
        points,
        records,
        last_change,
        converged: last_change < tol,
        extrapolated_log_p,
    })
}

/// Reflection-series value of `P{sup_[0,1] |B| <= eps}`.
pub fn brownian_small_ball(eps: f64) -> f64 {
    use std::f64::consts::PI;
    let mut sum = 0.0;
    for k in 0..200 {
        let odd = (2 * k + 1) as f64;
        let term = (-odd * odd * PI * PI / (8.0 * eps * eps)).exp() / odd;
        sum += if k % 2 == 0 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    4.0 / PI * sum
}
