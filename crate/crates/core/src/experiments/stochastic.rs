use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{config_err, csv_file, jointly_agree, json_file, require, Outcome, SummaryRow};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::CovKernel;
use crate::rng::RngStream;
use crate::samplers::{sample_gaussian_path, PathEnsemble};
use crate::smallball::{
    chung_statistic, estimate_splitting, exponent_slope, fit_constant, min_grid_experiment,
    moderate_regime_estimate, psi, ConstantFit, EstimateRecord, FitPoint, Kernel, MinGridConfig,
    MinGridResult, ModerateRow, Phi, ProcessSpec, SmallBallQuery, SplittingConfig,
};
use crate::spde::{InitialCondition, Scheme, Sigma, SpdeConfig};

/// Largest `|empirical - exact| / stderr` over the second-moment matrix.
pub fn max_covariance_z(ens: &PathEnsemble, kernel: &CovKernel) -> Result<f64> {
    let exact = kernel.matrix(ens.grid.points())?;
    let (cov, se) = ens.covariance_with_stderr();
    let n = ens.grid.n();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let diff = cov[i * n + j] - exact[(i, j)];
            let s = se[i * n + j];
            let z = if s > 0.0 {
                diff.abs() / s
            } else if diff.abs() > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(z);
        }
    }
    Ok(worst)
}

fn gibbs_splitting() -> SplittingConfig {
    SplittingConfig {
        particles: 100,
        rejuvenation_sweeps: 3,
        kernel: Kernel::Gibbs,
        ..Default::default()
    }
}

fn check_splitting(cfg: &SplittingConfig, process: Option<&ProcessSpec>) -> Result<()> {
    cfg.validate()
        .map_err(|e| config_err("splitting", e.to_string()))?;
    if cfg.kernel == Kernel::Gibbs && matches!(process, Some(ProcessSpec::Spde { .. })) {
        return Err(config_err(
            "splitting.kernel",
            "field queries need the pcn kernel",
        ));
    }
    Ok(())
}

fn check_epsilons(eps: &[f64], field: &str, upper: f64) -> Result<()> {
    require(!eps.is_empty(), field, "must not be empty")?;
    require(
        eps.iter().all(|&e| e > 0.0 && e < upper),
        field,
        &format!("entries must lie in (0, {upper})"),
    )
}

fn fmt_pm(x: f64, hw: f64) -> String {
    format!("{x:.4} ± {hw:.4}")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaFitParams {
    pub process: ProcessSpec,
    pub epsilons: Vec<f64>,
    /// Exponent of the small-ball law; 2 for Brownian motion and 4 otherwise when absent.
    pub exponent: Option<f64>,
    /// One grid size, or two for extrapolation in the grid spacing.
    pub points: Vec<usize>,
    pub window_end: f64,
    /// Grid bias is taken proportional to `dt^bias_rate`.
    pub bias_rate: f64,
    pub splitting: SplittingConfig,
}

impl Default for LambdaFitParams {
    fn default() -> Self {
        Self {
            process: ProcessSpec::Bm,
            epsilons: vec![0.3, 0.25, 0.2, 0.15],
            exponent: None,
            points: vec![1025, 4097],
            window_end: 1.0,
            bias_rate: 0.5,
            splitting: gibbs_splitting(),
        }
    }
}

impl LambdaFitParams {
    pub fn exponent(&self) -> f64 {
        self.exponent.unwrap_or(if self.process == ProcessSpec::Bm {
            2.0
        } else {
            4.0
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        check_epsilons(&self.epsilons, "epsilons", f64::INFINITY)?;
        let mut sorted = self.epsilons.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        require(
            sorted.len() >= 3,
            "epsilons",
            "need at least 3 distinct values",
        )?;
        require(
            self.exponent.is_none_or(|e| e > 0.0),
            "exponent",
            "must be > 0",
        )?;
        require(
            matches!(self.points.len(), 1 | 2) && self.points.iter().all(|&n| n >= 3),
            "points",
            "one or two grid sizes, each >= 3",
        )?;
        require(
            self.points.windows(2).all(|w| w[1] > w[0]),
            "points",
            "must be increasing",
        )?;
        require(self.window_end > 0.0, "window_end", "must be > 0")?;
        require(self.bias_rate > 0.0, "bias_rate", "must be > 0")?;
        check_splitting(&self.splitting, Some(&self.process))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridEstimate {
    pub points: usize,
    pub estimate: EstimateRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaFitResult {
    pub process: ProcessSpec,
    pub exponent: f64,
    pub points: Vec<usize>,
    pub estimates: Vec<GridEstimate>,
    /// Points entering the fit (extrapolated when two grids are given).
    pub fit_points: Vec<FitPoint>,
    pub fit: ConstantFit,
    /// Fit without the largest radius, and the relative move of `lambda_hat`.
    pub without_largest: Option<ConstantFit>,
    pub drop_largest_shift: Option<f64>,
    /// Exact constant where one is known.
    pub reference: Option<f64>,
}

/// Combine two grids assuming a bias proportional to `dt^rate`.
fn extrapolate(coarse: &EstimateRecord, fine: &EstimateRecord, r: f64) -> FitPoint {
    let (hc, hf) = (coarse.log_half_width(), fine.log_half_width());
    FitPoint {
        epsilon: fine.epsilon,
        log_p: (r * fine.log_p - coarse.log_p) / (r - 1.0),
        half_width: ((r * hf).powi(2) + hc * hc).sqrt() / (r - 1.0),
    }
}

pub fn lambda_fit(p: &LambdaFitParams, rng: RngStream) -> Result<LambdaFitResult> {
    p.validate()?;
    let mut estimates = Vec::new();
    for (gi, &n) in p.points.iter().enumerate() {
        for (ei, &eps) in p.epsilons.iter().enumerate() {
            let q = SmallBallQuery::new(p.process.clone(), eps, [0.0, p.window_end], n)?;
            let estimate =
                estimate_splitting(&q, &p.splitting, rng.descend(&[gi as u64, ei as u64]))?;
            estimates.push(GridEstimate {
                points: n,
                estimate,
            });
        }
    }
    let k = p.epsilons.len();
    let mut fit_points: Vec<FitPoint> = if p.points.len() == 2 {
        let r = ((p.points[1] - 1) as f64 / (p.points[0] - 1) as f64).powf(p.bias_rate);
        (0..k)
            .map(|i| extrapolate(&estimates[i].estimate, &estimates[k + i].estimate, r))
            .collect()
    } else {
        estimates
            .iter()
            .map(|g| FitPoint::from(&g.estimate))
            .collect()
    };
    fit_points.retain(|f| f.log_p.is_finite());
    let exponent = p.exponent();
    let fit = fit_constant(&fit_points, exponent)?;
    let (without_largest, drop_largest_shift) = if fit_points.len() >= 4 {
        let largest = fit_points
            .iter()
            .map(|f| f.epsilon)
            .fold(f64::MIN, f64::max);
        let rest: Vec<FitPoint> = fit_points
            .iter()
            .filter(|f| f.epsilon != largest)
            .cloned()
            .collect();
        let sub = fit_constant(&rest, exponent)?;
        let shift = ((sub.lambda_hat - fit.lambda_hat) / fit.lambda_hat).abs();
        (Some(sub), Some(shift))
    } else {
        (None, None)
    };
    let reference = (p.process == ProcessSpec::Bm && exponent == 2.0 && p.window_end == 1.0)
        .then(|| PI * PI / 8.0);
    Ok(LambdaFitResult {
        process: p.process.clone(),
        exponent,
        points: p.points.clone(),
        estimates,
        fit_points,
        fit,
        without_largest,
        drop_largest_shift,
        reference,
    })
}

pub(crate) fn lambda_fit_outcome(
    p: &LambdaFitParams,
    target: &str,
    rng: RngStream,
) -> Result<Outcome> {
    let r = lambda_fit(p, rng)?;
    let rows = r
        .estimates
        .iter()
        .map(|g| format!("{},{}", g.points, g.estimate.csv_row()));
    let estimates = csv_file(
        "estimates.csv",
        target,
        &format!("points,{}", EstimateRecord::CSV_HEADER),
        rows,
    );
    let mut summary = vec![
        SummaryRow::new(
            "lambda_hat",
            fmt_pm(r.fit.lambda_hat, r.fit.stderr),
            r.reference
                .map_or("none known".into(), |v| format!("{v:.4}")),
        ),
        SummaryRow::new("exponent (fixed)", format!("{}", r.exponent), ""),
        SummaryRow::new(
            "free exponent",
            r.fit
                .free_exponent
                .map_or("n/a".into(), |e| format!("{e:.3}")),
            format!("{}", r.exponent),
        ),
    ];
    if let Some(shift) = r.drop_largest_shift {
        summary.push(SummaryRow::new(
            "relative shift dropping largest eps",
            format!("{shift:.3}"),
            "",
        ));
    }
    Ok(Outcome {
        files: vec![estimates, json_file("fit.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropHParams {
    pub epsilons: Vec<f64>,
    pub phi: Phi,
    pub points: usize,
    pub process: ProcessSpec,
    pub lambda_hat: Option<f64>,
    pub lambda_stderr: f64,
    pub splitting: SplittingConfig,
}

impl Default for PropHParams {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-2, 1e-3],
            phi: Phi::LogLog,
            points: 257,
            process: ProcessSpec::HFree,
            lambda_hat: None,
            lambda_stderr: 0.0,
            splitting: gibbs_splitting(),
        }
    }
}

fn check_lambda(lambda: Option<f64>, stderr: f64) -> Result<f64> {
    let l = lambda.ok_or_else(|| config_err("lambda_hat", "required"))?;
    require(l > 0.0 && l.is_finite(), "lambda_hat", "must be > 0")?;
    require(stderr >= 0.0, "lambda_stderr", "must be >= 0")?;
    Ok(l)
}

impl PropHParams {
    pub(crate) fn validate(&self) -> Result<()> {
        check_epsilons(&self.epsilons, "epsilons", 1.0)?;
        require(self.points >= 3, "points", "must be >= 3")?;
        require(
            matches!(self.process, ProcessSpec::HFree | ProcessSpec::HDense),
            "process",
            "must be h_free or h_dense",
        )?;
        check_lambda(self.lambda_hat, self.lambda_stderr)?;
        check_splitting(&self.splitting, Some(&self.process))
    }
}

/// Normalized log-probability against `-constant`, for both constant conventions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModerateCheck {
    pub epsilon: f64,
    pub normalized: f64,
    pub half_width: f64,
    pub target_as_written: f64,
    pub target_corrected: f64,
    pub target_half_width_as_written: f64,
    pub target_half_width_corrected: f64,
    pub agrees_as_written: bool,
    pub agrees_corrected: bool,
}

/// The same probability computed directly on `[0, eps]` and after rescaling to `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferCheck {
    pub epsilon: f64,
    pub radius: f64,
    pub scaled_radius: f64,
    pub direct_log_p: f64,
    pub transferred: EstimateRecord,
    pub overlaps: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropHResult {
    pub lambda_hat: f64,
    pub constant_as_written: f64,
    pub constant_corrected: f64,
    pub rows: Vec<ModerateRow>,
    pub checks: Vec<ModerateCheck>,
    pub transfer: Vec<TransferCheck>,
}

fn moderate_checks(rows: &[ModerateRow], lambda: f64, stderr: f64) -> Vec<ModerateCheck> {
    let (cw, cc) = (2.0 * lambda / PI, lambda / PI);
    let rel = 1.96 * stderr / lambda;
    rows.iter()
        .map(|r| {
            let hw = 0.5 * (r.normalized_hi - r.normalized_lo);
            ModerateCheck {
                epsilon: r.epsilon,
                normalized: r.normalized,
                half_width: hw,
                target_as_written: -cw,
                target_corrected: -cc,
                target_half_width_as_written: cw * rel,
                target_half_width_corrected: cc * rel,
                agrees_as_written: jointly_agree(r.normalized, hw, -cw, cw * rel),
                agrees_corrected: jointly_agree(r.normalized, hw, -cc, cc * rel),
            }
        })
        .collect()
}

pub fn prop_h(p: &PropHParams, rng: RngStream) -> Result<PropHResult> {
    p.validate()?;
    let lambda = p.lambda_hat.expect("validated");
    let template = SmallBallQuery::new(p.process.clone(), 1.0, [0.0, 1.0], p.points)?;
    let rows = moderate_regime_estimate(&template, p.phi, &p.epsilons, &p.splitting, rng.child(0))?;
    let mut transfer = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let scaled = row.radius * row.epsilon.powf(-0.25);
        let q = template.with_epsilon(scaled);
        let est = estimate_splitting(&q, &p.splitting, rng.descend(&[1, i as u64]))?;
        transfer.push(TransferCheck {
            epsilon: row.epsilon,
            radius: row.radius,
            scaled_radius: scaled,
            direct_log_p: row.estimate.log_p,
            overlaps: est.overlaps(&row.estimate),
            transferred: est,
        });
    }
    Ok(PropHResult {
        lambda_hat: lambda,
        constant_as_written: 2.0 * lambda / PI,
        constant_corrected: lambda / PI,
        checks: moderate_checks(&rows, lambda, p.lambda_stderr),
        rows,
        transfer,
    })
}

const MODERATE_HEADER: &str =
    "epsilon,phi,radius,log_p,log_ci_lo,log_ci_hi,normalized,normalized_lo,normalized_hi";

fn moderate_csv_row(label: &str, r: &ModerateRow) -> String {
    format!(
        "{label},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
        r.epsilon,
        r.phi,
        r.radius,
        r.estimate.log_p,
        r.estimate.log_ci_lo,
        r.estimate.log_ci_hi,
        r.normalized,
        r.normalized_lo,
        r.normalized_hi
    )
}

pub(crate) fn prop_h_outcome(p: &PropHParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let r = prop_h(p, rng)?;
    let csv = csv_file(
        "moderate.csv",
        target,
        &format!("process,{MODERATE_HEADER}"),
        r.rows.iter().map(|row| moderate_csv_row("H", row)),
    );
    let mut summary = Vec::new();
    for c in &r.checks {
        summary.push(SummaryRow::new(
            format!("normalized log p at eps = {:e}", c.epsilon),
            fmt_pm(c.normalized, c.half_width),
            format!(
                "{:.4} (corrected), {:.4} (as written)",
                c.target_corrected, c.target_as_written
            ),
        ));
    }
    for t in &r.transfer {
        summary.push(SummaryRow::new(
            format!("scaling transfer at eps = {:e}", t.epsilon),
            format!("{:.4} vs {:.4}", t.direct_log_p, t.transferred.log_p),
            if t.overlaps {
                "intervals overlap"
            } else {
                "intervals disjoint"
            },
        ));
    }
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropZParams {
    pub epsilons: Vec<f64>,
    pub phi: Phi,
    pub points: usize,
    pub modes: usize,
    pub splitting: SplittingConfig,
}

impl Default for PropZParams {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-2, 1e-3],
            phi: Phi::LogLog,
            points: 129,
            modes: 1024,
            splitting: gibbs_splitting(),
        }
    }
}

impl PropZParams {
    pub(crate) fn validate(&self) -> Result<()> {
        check_epsilons(&self.epsilons, "epsilons", 1.0)?;
        require(self.points >= 3, "points", "must be >= 3")?;
        require(self.modes >= 1, "modes", "must be >= 1")?;
        check_splitting(&self.splitting, None)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropZResult {
    pub z_rows: Vec<ModerateRow>,
    pub h_rows: Vec<ModerateRow>,
    /// Per epsilon: whether the normalized values agree within joint intervals.
    pub agree: Vec<bool>,
}

pub fn prop_z(p: &PropZParams, rng: RngStream) -> Result<PropZResult> {
    p.validate()?;
    let zq = SmallBallQuery::new(
        ProcessSpec::ZTorus { modes: p.modes },
        1.0,
        [0.0, 1.0],
        p.points,
    )?;
    let hq = SmallBallQuery::new(ProcessSpec::HFree, 1.0, [0.0, 1.0], p.points)?;
    let z_rows = moderate_regime_estimate(&zq, p.phi, &p.epsilons, &p.splitting, rng.child(0))?;
    let h_rows = moderate_regime_estimate(&hq, p.phi, &p.epsilons, &p.splitting, rng.child(1))?;
    let agree = z_rows
        .iter()
        .zip(&h_rows)
        .map(|(z, h)| {
            jointly_agree(
                z.normalized,
                0.5 * (z.normalized_hi - z.normalized_lo),
                h.normalized,
                0.5 * (h.normalized_hi - h.normalized_lo),
            )
        })
        .collect();
    Ok(PropZResult {
        z_rows,
        h_rows,
        agree,
    })
}

pub(crate) fn prop_z_outcome(p: &PropZParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let r = prop_z(p, rng)?;
    let rows = r
        .z_rows
        .iter()
        .map(|row| moderate_csv_row("Z", row))
        .chain(r.h_rows.iter().map(|row| moderate_csv_row("H", row)));
    let csv = csv_file(
        "moderate.csv",
        target,
        &format!("process,{MODERATE_HEADER}"),
        rows,
    );
    let summary = r
        .z_rows
        .iter()
        .zip(&r.h_rows)
        .zip(&r.agree)
        .map(|((z, h), a)| {
            SummaryRow::new(
                format!("normalized log p at eps = {:e} (Z vs H)", z.epsilon),
                format!("{:.4} vs {:.4}", z.normalized, h.normalized),
                if *a { "agree" } else { "disagree" },
            )
        })
        .collect();
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremUParams {
    pub spde: SpdeConfig,
    pub x_index: usize,
    pub epsilons: Vec<f64>,
    pub phi: Phi,
    /// Diffusion coefficients to compare; the first is the reference.
    pub sigmas: Vec<Sigma>,
    pub splitting: SplittingConfig,
}

impl Default for TheoremUParams {
    fn default() -> Self {
        Self {
            spde: SpdeConfig {
                m: 32,
                dt: 1e-4,
                horizon: 1e-2,
                sigma: Sigma::Constant { value: 1.0 },
                u0: InitialCondition::Constant { value: 0.0 },
                scheme: Scheme::SemiImplicit,
            },
            x_index: 0,
            epsilons: vec![1e-2],
            phi: Phi::LogLog,
            sigmas: vec![
                Sigma::Constant { value: 1.0 },
                Sigma::Constant { value: 2.0 },
            ],
            splitting: SplittingConfig {
                particles: 100,
                rejuvenation_sweeps: 5,
                ..Default::default()
            },
        }
    }
}

impl TheoremUParams {
    pub(crate) fn validate(&self) -> Result<()> {
        self.spde
            .validate()
            .map_err(|e| config_err("spde", e.to_string()))?;
        require(self.x_index < self.spde.m, "x_index", "must be < spde.m")?;
        check_epsilons(&self.epsilons, "epsilons", 1.0)?;
        require(
            self.sigmas.len() >= 2,
            "sigmas",
            "need a reference and at least one comparison",
        )?;
        let x = self.spde.xs()[self.x_index];
        let u0 = self.spde.u0.eval(x);
        require(
            self.sigmas.iter().all(|s| s.eval(u0) != 0.0),
            "sigmas",
            "sigma(u0(x)) must be nonzero",
        )?;
        for &e in &self.epsilons {
            self.spde
                .with_horizon(e)
                .validate()
                .map_err(|err| config_err("epsilons", format!("eps = {e}: {err}")))?;
        }
        check_splitting(
            &self.splitting,
            Some(&ProcessSpec::Spde {
                config: self.spde.clone(),
                x_index: self.x_index,
                centering: true,
            }),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremUComparison {
    pub sigma_index: usize,
    pub epsilon: f64,
    /// `normalized_k / normalized_0` and its half-width.
    pub ratio: f64,
    pub half_width: f64,
    /// `(sigma_k(u0(x)) / sigma_0(u0(x)))^4`.
    pub expected: f64,
    pub agrees: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremUResult {
    pub sigma_at_u0: Vec<f64>,
    pub rows: Vec<Vec<ModerateRow>>,
    pub comparisons: Vec<TheoremUComparison>,
}

pub fn theorem_u(p: &TheoremUParams, rng: RngStream) -> Result<TheoremUResult> {
    p.validate()?;
    let u0 = p.spde.u0.eval(p.spde.xs()[p.x_index]);
    let sigma_at_u0: Vec<f64> = p.sigmas.iter().map(|s| s.eval(u0)).collect();
    let mut rows = Vec::new();
    for (k, sigma) in p.sigmas.iter().enumerate() {
        let config = SpdeConfig {
            sigma: sigma.clone(),
            ..p.spde.clone()
        };
        let q = SmallBallQuery::new(
            ProcessSpec::Spde {
                config,
                x_index: p.x_index,
                centering: true,
            },
            1.0,
            [0.0, p.spde.horizon],
            0,
        )?;
        rows.push(moderate_regime_estimate(
            &q,
            p.phi,
            &p.epsilons,
            &p.splitting,
            rng.child(k as u64),
        )?);
    }
    let mut comparisons = Vec::new();
    for k in 1..rows.len() {
        for (a, b) in rows[0].iter().zip(&rows[k]) {
            let ratio = b.normalized / a.normalized;
            let rel =
                |r: &ModerateRow| 0.5 * (r.normalized_hi - r.normalized_lo) / r.normalized.abs();
            let half_width = ratio.abs() * (rel(a).powi(2) + rel(b).powi(2)).sqrt();
            let expected = (sigma_at_u0[k] / sigma_at_u0[0]).powi(4);
            comparisons.push(TheoremUComparison {
                sigma_index: k,
                epsilon: a.epsilon,
                ratio,
                half_width,
                expected,
                agrees: (ratio - expected).abs() <= half_width,
            });
        }
    }
    Ok(TheoremUResult {
        sigma_at_u0,
        rows,
        comparisons,
    })
}

pub(crate) fn theorem_u_outcome(
    p: &TheoremUParams,
    target: &str,
    rng: RngStream,
) -> Result<Outcome> {
    let r = theorem_u(p, rng)?;
    let rows = r.rows.iter().enumerate().flat_map(|(k, rs)| {
        rs.iter()
            .map(move |row| moderate_csv_row(&k.to_string(), row))
    });
    let csv = csv_file(
        "moderate.csv",
        target,
        &format!("sigma_index,{MODERATE_HEADER}"),
        rows,
    );
    let summary = r
        .comparisons
        .iter()
        .map(|c| {
            SummaryRow::new(
                format!(
                    "ratio of normalized log p, sigma {} vs 0, eps = {:e}",
                    c.sigma_index, c.epsilon
                ),
                fmt_pm(c.ratio, c.half_width),
                format!("{:.4}", c.expected),
            )
        })
        .collect();
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChungParams {
    pub paths: usize,
    /// Smallest positive time of the geometric grid on `[0, 1]`.
    pub t_min: f64,
    pub points: usize,
    pub radii: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub lambda_hat: Option<f64>,
}

impl Default for ChungParams {
    fn default() -> Self {
        Self {
            paths: 200,
            t_min: 1e-8,
            points: 200,
            radii: 16,
            r_min: 1e-6,
            r_max: 0.1,
            lambda_hat: None,
        }
    }
}

impl ChungParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(self.paths >= 10, "paths", "must be >= 10")?;
        require(
            self.t_min > 0.0 && self.t_min < 1.0,
            "t_min",
            "must lie in (0, 1)",
        )?;
        require(self.points >= 3, "points", "must be >= 3")?;
        require(self.radii >= 8, "radii", "must be >= 8")?;
        require(self.r_min >= self.t_min, "r_min", "must be >= t_min")?;
        require(
            self.r_max > self.r_min && self.r_max <= 1.0,
            "r_max",
            "must lie in (r_min, 1]",
        )?;
        require(
            self.lambda_hat.is_none_or(|l| l > 0.0),
            "lambda_hat",
            "must be > 0",
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChungResult {
    pub epsilons: Vec<f64>,
    pub psi: Vec<f64>,
    pub running_inf_q10: Vec<f64>,
    pub running_inf_q50: Vec<f64>,
    pub running_inf_q90: Vec<f64>,
    pub monotone: bool,
    pub reference_as_written: Option<f64>,
    pub reference_corrected: Option<f64>,
    pub note: String,
}

pub fn chung_diagnostic(p: &ChungParams, rng: RngStream) -> Result<(ChungResult, String)> {
    p.validate()?;
    let grid = TimeGrid::geometric(p.t_min, 1.0, p.points)?;
    let (ens, _) = sample_gaussian_path(&CovKernel::HFree, &grid, p.paths, rng)?;
    let ratio = (p.r_max / p.r_min).ln() / (p.radii - 1) as f64;
    let eps: Vec<f64> = (0..p.radii)
        .map(|k| p.r_max * (-ratio * k as f64).exp())
        .collect();
    let table = chung_statistic(&ens, &eps)?;
    let result = ChungResult {
        psi: table.epsilons.iter().map(|&e| psi(e)).collect(),
        running_inf_q10: table.running_inf_quantile(0.1),
        running_inf_q50: table.running_inf_quantile(0.5),
        running_inf_q90: table.running_inf_quantile(0.9),
        monotone: table.is_monotone(),
        reference_as_written: p.lambda_hat.map(|l| (2.0 * l / PI).powf(0.25)),
        reference_corrected: p.lambda_hat.map(|l| (l / PI).powf(0.25)),
        note: "diagnostic only: the liminf converges on a log log scale and is not reached at these radii".into(),
        epsilons: table.epsilons.clone(),
    };
    Ok((result, table.to_csv()))
}

pub(crate) fn chung_outcome(p: &ChungParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let (r, csv) = chung_diagnostic(p, rng)?;
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let table = csv_file("chung.csv", target, &header, lines.map(String::from));
    let last = r.epsilons.len() - 1;
    let summary = vec![
        SummaryRow::new("running inf non-increasing", r.monotone.to_string(), "true"),
        SummaryRow::new(
            format!("10% quantile of running inf at t = {:e}", r.epsilons[last]),
            format!("{:.4}", r.running_inf_q10[last]),
            r.reference_corrected
                .zip(r.reference_as_written)
                .map_or("".into(), |(c, w)| {
                    format!("{c:.4} (corrected), {w:.4} (as written)")
                }),
        ),
    ];
    Ok(Outcome {
        files: vec![table, json_file("result.json", target, &r)?],
        summary,
    })
}

/// Which constant multiplies `lambda` in the single-site law of the free-space field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `lambda / pi`, consistent with the fitted decomposition.
    #[default]
    Corrected,
    /// `2 lambda / pi`.
    AsWritten,
}

impl Convention {
    pub fn constant(self, lambda: f64) -> f64 {
        match self {
            Convention::Corrected => lambda / PI,
            Convention::AsWritten => 2.0 * lambda / PI,
        }
    }

    fn other(self) -> Self {
        match self {
            Convention::Corrected => Convention::AsWritten,
            Convention::AsWritten => Convention::Corrected,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinGridParams {
    pub ns: Vec<usize>,
    pub alpha: f64,
    pub q: f64,
    /// Defaults to the middle of the admissible range.
    pub gamma: Option<f64>,
    pub theta: f64,
    pub lambda_hat: Option<f64>,
    pub convention: Convention,
    pub points: usize,
    pub splitting: SplittingConfig,
    /// Allowed relative deviation of the slope from the predicted exponent.
    pub tolerance: f64,
}

impl Default for MinGridParams {
    fn default() -> Self {
        Self {
            ns: vec![10, 20, 40],
            alpha: 0.5,
            q: 1.0,
            gamma: None,
            theta: 1.0,
            lambda_hat: None,
            convention: Convention::Corrected,
            points: 65,
            splitting: gibbs_splitting(),
            tolerance: 0.3,
        }
    }
}

impl MinGridParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(
            self.ns.len() >= 2 && self.ns.iter().all(|&n| n >= 1),
            "ns",
            "need >= 2 indices, each >= 1",
        )?;
        require(self.alpha > 0.0, "alpha", "must be > 0")?;
        require(self.q > 0.0, "q", "must be > 0")?;
        require(self.theta > 0.0, "theta", "must be > 0")?;
        require(self.points >= 3, "points", "must be >= 3")?;
        require(self.tolerance > 0.0, "tolerance", "must be > 0")?;
        let lambda = check_lambda(self.lambda_hat, 0.0)?;
        if let Some(g) = self.gamma {
            let max = (self.convention.constant(lambda) * (1.0 + self.alpha) / self.q).powf(0.25);
            if !(g > 0.0 && g < max) {
                return Err(config_err(
                    "gamma",
                    Error::GammaOutOfRange { gamma: g, max }.to_string(),
                ));
            }
        }
        check_splitting(&self.splitting, None)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinGridSummary {
    pub convention: Convention,
    pub constant: f64,
    pub gamma: f64,
    pub gamma_max: f64,
    pub results: Vec<MinGridResult>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub predicted: f64,
    pub relative_error: f64,
    pub within_tolerance: bool,
    /// Predicted exponent at the same gamma under the other convention.
    pub predicted_other_convention: f64,
}

pub fn min_grid(p: &MinGridParams, rng: RngStream) -> Result<MinGridSummary> {
    p.validate()?;
    let lambda = p.lambda_hat.expect("validated");
    let constant = p.convention.constant(lambda);
    let base = MinGridConfig {
        n: p.ns[0],
        alpha: p.alpha,
        q: p.q,
        gamma: 1.0,
        theta: p.theta,
        constant,
        points: p.points,
        splitting: p.splitting.clone(),
    };
    let gamma_max = base.gamma_max();
    let gamma = p.gamma.unwrap_or(0.5 * gamma_max);
    let mut results = Vec::new();
    for (i, &n) in p.ns.iter().enumerate() {
        let cfg = MinGridConfig {
            n,
            gamma,
            ..base.clone()
        };
        results.push(min_grid_experiment(&cfg, rng.child(i as u64))?);
    }
    let (slope, slope_stderr) = exponent_slope(&results)?;
    let predicted = MinGridConfig {
        gamma,
        ..base.clone()
    }
    .predicted_exponent();
    let other = MinGridConfig {
        gamma,
        constant: p.convention.other().constant(lambda),
        ..base
    };
    let relative_error = ((slope - predicted) / predicted).abs();
    Ok(MinGridSummary {
        convention: p.convention,
        constant,
        gamma,
        gamma_max,
        results,
        slope,
        slope_stderr,
        predicted,
        relative_error,
        within_tolerance: relative_error <= p.tolerance,
        predicted_other_convention: other.predicted_exponent(),
    })
}

pub(crate) fn min_grid_outcome(p: &MinGridParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let r = min_grid(p, rng)?;
    let rows = r.results.iter().map(|m| {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            m.n, m.sites, m.radius, m.single_site.log_p, m.log_p, m.log_ci_lo, m.log_ci_hi
        )
    });
    let csv = csv_file(
        "min_grid.csv",
        target,
        "n,sites,radius,single_site_log_p,log_p,log_ci_lo,log_ci_hi",
        rows,
    );
    let summary = vec![
        SummaryRow::new(
            "gamma",
            format!("{:.4}", r.gamma),
            format!("admissible below {:.4}", r.gamma_max),
        ),
        SummaryRow::new(
            "slope of log p against log n",
            fmt_pm(r.slope, 1.96 * r.slope_stderr),
            format!(
                "{:.4} (other convention {:.4})",
                r.predicted, r.predicted_other_convention
            ),
        ),
        SummaryRow::new(
            "relative error",
            format!("{:.3}", r.relative_error),
            format!("<= {}", p.tolerance),
        ),
    ];
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn light() -> SplittingConfig {
        SplittingConfig {
            particles: 100,
            rejuvenation_sweeps: 2,
            repetitions: 10,
            ..gibbs_splitting()
        }
    }

    #[test]
    fn sampler_z_scores_stay_small_for_brownian_paths() {
        let grid = TimeGrid::uniform(1.0, 9).unwrap();
        let (ens, _) =
            sample_gaussian_path(&CovKernel::Bm, &grid, 4000, RngStream::new(1, 0)).unwrap();
        let z = max_covariance_z(&ens, &CovKernel::Bm).unwrap();
        assert!(z < 5.0, "{z}");
        let z_wrong = max_covariance_z(&ens, &CovKernel::HFree).unwrap();
        assert!(z_wrong > 10.0, "{z_wrong}");
    }

    #[test]
    fn brownian_fit_lands_near_the_exact_constant() {
        let p = LambdaFitParams {
            epsilons: vec![0.5, 0.4, 0.3],
            points: vec![65, 257],
            splitting: light(),
            ..Default::default()
        };
        let r = lambda_fit(&p, RngStream::new(3, 0)).unwrap();
        let reference = r.reference.unwrap();
        assert!(
            (r.fit.lambda_hat / reference - 1.0).abs() < 0.15,
            "{} vs {reference}",
            r.fit.lambda_hat
        );
        assert_eq!(r.estimates.len(), 6);
    }

    #[test]
    fn gibbs_is_rejected_for_the_spde() {
        let p = TheoremUParams {
            splitting: gibbs_splitting(),
            ..Default::default()
        };
        match p.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "params.splitting.kernel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chung_quantiles_run_downward() {
        let p = ChungParams {
            paths: 20,
            points: 40,
            radii: 8,
            r_min: 1e-4,
            lambda_hat: Some(1.2),
            ..Default::default()
        };
        let (r, csv) = chung_diagnostic(&p, RngStream::new(5, 0)).unwrap();
        assert!(r.monotone);
        assert!(r.running_inf_q50.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(csv.lines().count() > 8);
        assert!(r.reference_as_written.unwrap() > r.reference_corrected.unwrap());
    }

    #[test]
    fn conventions_differ_by_two() {
        assert_eq!(
            Convention::AsWritten.constant(1.5),
            2.0 * Convention::Corrected.constant(1.5)
        );
        assert_eq!(Convention::Corrected.other(), Convention::AsWritten);
    }

    #[test]
    fn min_grid_rejects_inadmissible_gamma() {
        let p = MinGridParams {
            lambda_hat: Some(1.0),
            gamma: Some(10.0),
            ..Default::default()
        };
        match p.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "params.gamma"),
            other => panic!("{other:?}"),
        }
    }
}
