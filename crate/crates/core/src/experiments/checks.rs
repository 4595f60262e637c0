use serde::{Deserialize, Serialize};

use super::stochastic::max_covariance_z;
use super::{config_err, csv_file, json_file, require, Outcome, SummaryRow};
use crate::asymptotics::{
    build_entropy_cover, ratio_trend, verify_d_interpolation, DBoundReport, RatioTrend,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{
    canonical_distance_t, cov_h, fit_decomposition, hz_cross_covariance, hz_gap_variance,
    kappa_consistent, var_z_exact, CovKernel, DecompositionFit,
};
use crate::rng::RngStream;
use crate::samplers::{
    coupled_h_conditional, coupled_h_from_f_t, sample_fbm14, sample_gaussian_path, ZTorusSampler,
};
use crate::smallball::{
    estimate_splitting, EstimateRecord, Kernel, ProcessSpec, SmallBallQuery, SplittingConfig,
};
use crate::spde::{
    error_rate_study, linearization_error, solve_u, solve_z_coupled, ErrorRateRow,
    InitialCondition, NoiseArray, Scheme, Sigma, SpdeConfig,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionParams {
    pub horizon: f64,
    /// Grid size for the fit and for the coupled sampler.
    pub n: usize,
    pub paths: usize,
    /// Also compare the F, T, H and Z samplers with their kernels.
    pub check_samplers: bool,
    pub sampler_points: usize,
    pub sampler_paths: usize,
    pub z_modes: usize,
}

impl Default for DecompositionParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n: 64,
            paths: 100_000,
            check_samplers: true,
            sampler_points: 128,
            sampler_paths: 100_000,
            z_modes: 64,
        }
    }
}

impl DecompositionParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(self.horizon > 0.0, "horizon", "must be > 0")?;
        require(self.n >= 3, "n", "must be >= 3")?;
        require(self.paths >= 100, "paths", "must be >= 100")?;
        require(self.sampler_points >= 3, "sampler_points", "must be >= 3")?;
        require(self.sampler_paths >= 100, "sampler_paths", "must be >= 100")?;
        require(self.z_modes >= 1, "z_modes", "must be >= 1")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerCheck {
    pub process: String,
    pub points: usize,
    pub paths: usize,
    pub max_z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub fit: DecompositionFit,
    /// `H = F / amplitude - T` with `T` drawn given `F`.
    pub coupled_h: SamplerCheck,
    /// The same difference with `T` drawn independently of `F`.
    pub coupled_h_independent: SamplerCheck,
    pub samplers: Vec<SamplerCheck>,
}

fn sampler_checks(
    p: &DecompositionParams,
    kappa: f64,
    rng: RngStream,
) -> Result<Vec<SamplerCheck>> {
    let grid = TimeGrid::uniform(1.0, p.sampler_points)?;
    let count = p.sampler_paths;
    let check = |name: &str, max_z: f64| SamplerCheck {
        process: name.into(),
        points: grid.n(),
        paths: count,
        max_z,
    };
    let mut out = Vec::new();
    let f = sample_fbm14(&grid, count, rng.child(0))?;
    out.push(check("F", max_covariance_z(&f, &CovKernel::FFbm14)?));
    drop(f);
    let t_kernel = CovKernel::TAux { kappa };
    let (t, _) = sample_gaussian_path(&t_kernel, &grid, count, rng.child(1))?;
    out.push(check("T", max_covariance_z(&t, &t_kernel)?));
    drop(t);
    let (h, _) = sample_gaussian_path(&CovKernel::HFree, &grid, count, rng.child(2))?;
    out.push(check("H", max_covariance_z(&h, &CovKernel::HFree)?));
    drop(h);
    let sampler = ZTorusSampler::new(&grid, 1, p.z_modes)?;
    let x = sampler.xs()[0];
    let z = sampler.sample(count, rng.child(3)).at_point(0);
    out.push(check(
        "Z",
        max_covariance_z(
            &z,
            &CovKernel::ZTorus {
                x,
                y: x,
                modes: p.z_modes,
            },
        )?,
    ));
    Ok(out)
}

pub fn decomposition_check(p: &DecompositionParams, rng: RngStream) -> Result<DecompositionResult> {
    p.validate()?;
    let fit = fit_decomposition(p.horizon, p.n)?;
    let grid = TimeGrid::uniform(p.horizon, p.n)?;
    let f = sample_fbm14(&grid, p.paths, rng.child(0))?;
    let (t, _) = sample_gaussian_path(
        &CovKernel::TAux { kappa: fit.kappa },
        &grid,
        p.paths,
        rng.child(1),
    )?;
    let independent = coupled_h_from_f_t(&f, &t, &fit)?;
    let coupled_h_independent = SamplerCheck {
        process: "H from F and independent T".into(),
        points: grid.n(),
        paths: p.paths,
        max_z: max_covariance_z(&independent, &CovKernel::HFree)?,
    };
    drop((t, independent));
    let h = coupled_h_conditional(&f, &fit, rng.child(3))?;
    let coupled_h = SamplerCheck {
        process: "H from F and T given F".into(),
        points: grid.n(),
        paths: p.paths,
        max_z: max_covariance_z(&h, &CovKernel::HFree)?,
    };
    drop((f, h));
    let samplers = if p.check_samplers {
        sampler_checks(p, fit.kappa, rng.child(2))?
    } else {
        Vec::new()
    };
    Ok(DecompositionResult {
        fit,
        coupled_h,
        coupled_h_independent,
        samplers,
    })
}

pub(crate) fn decomposition_outcome(
    p: &DecompositionParams,
    target: &str,
    rng: RngStream,
) -> Result<Outcome> {
    let r = decomposition_check(p, rng)?;
    let mut summary = vec![
        SummaryRow::new(
            "fitted kappa",
            format!("{:.6}", r.fit.kappa),
            format!("{:.6} as written", r.fit.kappa_as_written),
        ),
        SummaryRow::new(
            "fitted amplitude",
            format!("{:.6}", r.fit.amplitude),
            format!("{:.6} as written", r.fit.amplitude_as_written),
        ),
        SummaryRow::new(
            "max residual (fitted)",
            format!("{:.3e}", r.fit.max_residual),
            format!("{:.3e} as written", r.fit.residual_as_written),
        ),
        SummaryRow::new(
            "coupled H max z (T given F)",
            format!("{:.3}", r.coupled_h.max_z),
            "< 4",
        ),
        SummaryRow::new(
            "coupled H max z (T independent of F)",
            format!("{:.3}", r.coupled_h_independent.max_z),
            "covariance is cov_H + 2 cov_T",
        ),
    ];
    for s in &r.samplers {
        summary.push(SummaryRow::new(
            format!("{} sampler max z", s.process),
            format!("{:.3}", s.max_z),
            "< 4",
        ));
    }
    let rows = [&r.coupled_h, &r.coupled_h_independent]
        .into_iter()
        .chain(&r.samplers)
        .map(|s| format!("{},{},{},{:e}", s.process, s.points, s.paths, s.max_z));
    let csv = csv_file(
        "covariance_z.csv",
        target,
        "process,points,paths,max_z",
        rows,
    );
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationParams {
    pub spde: SpdeConfig,
    pub t_list: Vec<f64>,
    pub replicas: usize,
    /// Replicas for the constant-sigma control, where the error vanishes.
    pub control_replicas: usize,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        Self {
            spde: SpdeConfig {
                m: 256,
                dt: 1e-5,
                horizon: 1e-2,
                sigma: Sigma::Cos,
                u0: InitialCondition::SinPi {
                    amplitude: 1.0,
                    k: 1,
                },
                scheme: Scheme::SemiImplicit,
            },
            t_list: vec![1e-2, 1e-3],
            replicas: 100,
            control_replicas: 4,
        }
    }
}

impl LocalizationParams {
    pub(crate) fn validate(&self) -> Result<()> {
        self.spde
            .validate()
            .map_err(|e| config_err("spde", e.to_string()))?;
        require(!self.t_list.is_empty(), "t_list", "must not be empty")?;
        for &t in &self.t_list {
            require(
                t > 0.0 && t <= 0.1,
                "t_list",
                "entries must lie in (0, 0.1]",
            )?;
            self.spde
                .with_horizon(t)
                .validate()
                .map_err(|e| config_err("t_list", format!("t = {t}: {e}")))?;
        }
        require(self.replicas >= 100, "replicas", "must be >= 100")?;
        require(
            self.control_replicas >= 1,
            "control_replicas",
            "must be >= 1",
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub rows: Vec<ErrorRateRow>,
    /// Median of the normalized sup at the last time over that at the first.
    pub median_ratio: f64,
    /// Largest linearization error over the constant-sigma control runs.
    pub control_max_error: f64,
}

pub fn localization_rate(p: &LocalizationParams, rng: RngStream) -> Result<LocalizationResult> {
    p.validate()?;
    let rows = error_rate_study(&p.spde, &p.t_list, p.replicas, rng.child(0))?;
    let median_ratio = rows[rows.len() - 1].sup_ratio_quantiles[2] / rows[0].sup_ratio_quantiles[2];
    let horizon = p.t_list.iter().copied().fold(0.0, f64::max);
    let control = SpdeConfig {
        sigma: Sigma::Constant { value: 0.7 },
        ..p.spde.with_horizon(horizon)
    };
    let mut control_max_error = 0.0f64;
    for r in 0..p.control_replicas {
        let noise = NoiseArray::sample(&control, rng.descend(&[1, r as u64]));
        let u = solve_u(&control, &noise)?;
        let z = solve_z_coupled(&control, &noise)?;
        control_max_error = control_max_error.max(linearization_error(&u, &z, &control)?.sup_abs());
    }
    Ok(LocalizationResult {
        rows,
        median_ratio,
        control_max_error,
    })
}

pub(crate) fn localization_outcome(
    p: &LocalizationParams,
    target: &str,
    rng: RngStream,
) -> Result<Outcome> {
    let r = localization_rate(p, rng)?;
    let rows = r.rows.iter().map(|row| {
        let q = row.sup_ratio_quantiles.map(|v| format!("{v:e}")).join(",");
        let pq = row
            .point_ratio_quantiles
            .map(|v| format!("{v:e}"))
            .join(",");
        format!("{:e},{},{q},{pq},{:e}", row.t, row.replicas, row.tail_slope)
    });
    let csv = csv_file(
        "error_rate.csv",
        target,
        "t,replicas,sup_q10,sup_q25,sup_q50,sup_q75,sup_q90,point_q10,point_q25,point_q50,point_q75,point_q90,tail_slope",
        rows,
    );
    let mut summary: Vec<SummaryRow> = r
        .rows
        .iter()
        .map(|row| {
            SummaryRow::new(
                format!("median sup|E| / (sqrt(t) log+(1/t)) at t = {:e}", row.t),
                format!("{:.4}", row.sup_ratio_quantiles[2]),
                "",
            )
        })
        .collect();
    summary.push(SummaryRow::new(
        "median ratio last/first t",
        format!("{:.3}", r.median_ratio),
        "[0.5, 2]",
    ));
    summary.push(SummaryRow::new(
        "constant sigma max |E|",
        format!("{:.3e}", r.control_max_error),
        "0",
    ));
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecursionParams {
    pub cs: Vec<f64>,
    pub indices: Vec<usize>,
}

impl Default for RecursionParams {
    fn default() -> Self {
        Self {
            cs: vec![0.5, 1.0, 4.0],
            indices: vec![1_000, 10_000, 100_000, 1_000_000],
        }
    }
}

impl RecursionParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(
            !self.cs.is_empty() && self.cs.iter().all(|&c| c > 0.0),
            "cs",
            "need positive values",
        )?;
        require(
            !self.indices.is_empty() && self.indices.iter().all(|&n| n >= 1),
            "indices",
            "need indices >= 1",
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecursionResult {
    pub trends: Vec<RatioTrend>,
}

pub(crate) fn recursion_outcome(p: &RecursionParams, target: &str) -> Result<Outcome> {
    p.validate()?;
    let trends =
        p.cs.iter()
            .map(|&c| ratio_trend(c, &p.indices))
            .collect::<Result<Vec<_>>>()?;
    let rows = trends.iter().flat_map(|t| {
        t.indices
            .iter()
            .zip(&t.ratios)
            .map(move |(n, r)| format!("{:e},{n},{r:e}", t.c))
    });
    let csv = csv_file("ratios.csv", target, "c,n,ratio", rows);
    let summary = trends
        .iter()
        .map(|t| {
            SummaryRow::new(
                format!(
                    "ratio at n = {} for c = {}",
                    t.indices[t.indices.len() - 1],
                    t.c
                ),
                format!("{:.5}", t.ratios[t.ratios.len() - 1]),
                format!(
                    "1; |ratio - 1| decreasing from n = {}, approached from {}",
                    t.monotone_from,
                    if t.from_above { "above" } else { "below" }
                ),
            )
        })
        .collect();
    let r = RecursionResult { trends };
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

/// Small-ball order of T against fBm(1/4) on the same grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TOrderParams {
    pub radii: Vec<f64>,
    pub points: usize,
    pub compare_radius: f64,
    pub splitting: SplittingConfig,
}

impl Default for TOrderParams {
    fn default() -> Self {
        Self {
            radii: vec![0.1, 0.05, 0.02],
            points: 129,
            compare_radius: 0.05,
            splitting: SplittingConfig {
                particles: 100,
                rejuvenation_sweeps: 3,
                kernel: Kernel::Gibbs,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TOrderResult {
    pub t_estimates: Vec<EstimateRecord>,
    /// Smallest `L >= 1` with `log p_T(r) >= -L/r - log L`, per radius and overall.
    pub l_per_radius: Vec<f64>,
    pub l_fit: f64,
    /// Slope of `log(-log p_T)` against `log(1/r)`.
    pub order: f64,
    pub f_estimate: EstimateRecord,
    /// `log p_T - log p_F` at the comparison radius, and its lower end.
    pub log_ratio: f64,
    pub log_ratio_lo: f64,
}

/// Solve `L/r + log L = target` for `L >= 1`.
fn solve_l(r: f64, target: f64) -> f64 {
    let g = |l: f64| l / r + l.ln();
    if g(1.0) >= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (1.0, (target * r).max(2.0));
    while g(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn t_order(p: &TOrderParams, kappa: f64, rng: RngStream) -> Result<TOrderResult> {
    let mut t_estimates = Vec::new();
    for (i, &r) in p.radii.iter().enumerate() {
        let q = SmallBallQuery::new(ProcessSpec::TAux { kappa }, r, [0.0, 1.0], p.points)?;
        t_estimates.push(estimate_splitting(
            &q,
            &p.splitting,
            rng.descend(&[0, i as u64]),
        )?);
    }
    let l_per_radius: Vec<f64> = t_estimates
        .iter()
        .map(|e| solve_l(e.epsilon, -e.log_p))
        .collect();
    let l_fit = l_per_radius.iter().copied().fold(1.0, f64::max);
    let xs: Vec<f64> = t_estimates.iter().map(|e| (1.0 / e.epsilon).ln()).collect();
    let ys: Vec<f64> = t_estimates
        .iter()
        .map(|e| (-e.log_p).max(f64::MIN_POSITIVE).ln())
        .collect();
    let order = crate::stats::weighted_line(&xs, &ys, &vec![1.0; xs.len()])
        .map(|(_, b, _)| b)
        .unwrap_or(f64::NAN);
    let fq = SmallBallQuery::new(ProcessSpec::Fbm14, p.compare_radius, [0.0, 1.0], p.points)?;
    let f_estimate = estimate_splitting(&fq, &p.splitting, rng.child(1))?;
    let tq = SmallBallQuery::new(
        ProcessSpec::TAux { kappa },
        p.compare_radius,
        [0.0, 1.0],
        p.points,
    )?;
    let t_cmp = estimate_splitting(&tq, &p.splitting, rng.child(2))?;
    Ok(TOrderResult {
        log_ratio: t_cmp.log_p - f_estimate.log_p,
        log_ratio_lo: t_cmp.log_ci_lo - f_estimate.log_ci_hi,
        t_estimates,
        l_per_radius,
        l_fit,
        order,
        f_estimate,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyParams {
    /// Radii `2^-k` for `k` in `k_min..=k_max`.
    pub k_min: u32,
    pub k_max: u32,
    /// Interpolation constant; fitted from `pairs` sampled pairs when absent.
    pub c: Option<f64>,
    pub kappa: Option<f64>,
    pub pairs: usize,
    pub t_order: Option<TOrderParams>,
}

impl Default for EntropyParams {
    fn default() -> Self {
        Self {
            k_min: 3,
            k_max: 10,
            c: None,
            kappa: None,
            pairs: 10_000,
            t_order: None,
        }
    }
}

impl EntropyParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(
            self.k_min >= 1 && self.k_max >= self.k_min + 1,
            "k_max",
            "need 1 <= k_min < k_max",
        )?;
        require(self.k_max <= 30, "k_max", "must be <= 30")?;
        require(self.c.is_none_or(|c| c > 0.0), "c", "must be > 0")?;
        require(self.kappa.is_none_or(|k| k > 0.0), "kappa", "must be > 0")?;
        require(self.pairs >= 10_000, "pairs", "must be >= 10000")?;
        if let Some(t) = &self.t_order {
            require(
                t.radii.len() >= 2 && t.radii.iter().all(|&r| r > 0.0),
                "t_order.radii",
                "need >= 2 positive radii",
            )?;
            require(t.points >= 3, "t_order.points", "must be >= 3")?;
            require(
                t.compare_radius > 0.0,
                "t_order.compare_radius",
                "must be > 0",
            )?;
            t.splitting
                .validate()
                .map_err(|e| config_err("t_order.splitting", e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyResult {
    pub c: f64,
    pub c_fitted: bool,
    pub kappa: f64,
    pub epsilons: Vec<f64>,
    pub counts: Vec<usize>,
    /// `count * eps`; bounded when the count grows like `1/eps`.
    pub scaled_counts: Vec<f64>,
    pub max_scaled_count: f64,
    /// `count(eps/2) / count(eps)` for consecutive radii.
    pub doubling_ratios: Vec<f64>,
    pub worst_step_ratio: f64,
    pub t_order: Option<TOrderResult>,
}

pub fn entropy(p: &EntropyParams, rng: RngStream) -> Result<EntropyResult> {
    p.validate()?;
    let kappa = p.kappa.unwrap_or_else(kappa_consistent);
    let (c, c_fitted) = match p.c {
        Some(c) => (c, false),
        None => (
            verify_d_interpolation(p.pairs, kappa, rng.child(0))?.c,
            true,
        ),
    };
    let mut epsilons = Vec::new();
    let mut counts = Vec::new();
    let mut worst = 0.0f64;
    for k in p.k_min..=p.k_max {
        let eps = 0.5f64.powi(k as i32);
        let cover = build_entropy_cover(eps, c, kappa)?;
        worst = worst.max(cover.worst_ratio);
        epsilons.push(eps);
        counts.push(cover.count);
    }
    let scaled_counts: Vec<f64> = counts
        .iter()
        .zip(&epsilons)
        .map(|(&n, e)| n as f64 * e)
        .collect();
    let doubling_ratios = counts
        .windows(2)
        .map(|w| w[1] as f64 / w[0] as f64)
        .collect();
    let t_order = p
        .t_order
        .as_ref()
        .map(|t| t_order(t, kappa, rng.child(1)))
        .transpose()?;
    Ok(EntropyResult {
        c,
        c_fitted,
        kappa,
        max_scaled_count: scaled_counts.iter().copied().fold(0.0, f64::max),
        scaled_counts,
        epsilons,
        counts,
        doubling_ratios,
        worst_step_ratio: worst,
        t_order,
    })
}

pub(crate) fn entropy_outcome(p: &EntropyParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let r = entropy(p, rng)?;
    let rows = r
        .epsilons
        .iter()
        .zip(&r.counts)
        .zip(&r.scaled_counts)
        .map(|((e, n), s)| format!("{e:e},{n},{s:e}"));
    let csv = csv_file(
        "cover.csv",
        target,
        "epsilon,count,count_times_epsilon",
        rows,
    );
    let mut summary = vec![
        SummaryRow::new(
            "interpolation constant c",
            format!("{:.5}", r.c),
            if r.c_fitted { "fitted" } else { "given" },
        ),
        SummaryRow::new(
            "max count * eps",
            format!("{:.4}", r.max_scaled_count),
            "bounded",
        ),
        SummaryRow::new(
            "doubling ratios",
            r.doubling_ratios
                .iter()
                .map(|d| format!("{d:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            "[1.8, 2.2]",
        ),
    ];
    if let Some(t) = &r.t_order {
        summary.push(SummaryRow::new(
            "fitted L",
            format!("{:.4}", t.l_fit),
            "> 1, finite",
        ));
        summary.push(SummaryRow::new(
            "order of -log p_T in 1/r",
            format!("{:.3}", t.order),
            "1",
        ));
        summary.push(SummaryRow::new(
            "log p_T - log p_F at comparison radius",
            format!("{:.3} (lower end {:.3})", t.log_ratio, t.log_ratio_lo),
            format!("> {:.3}", 100f64.ln()),
        ));
    }
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DBoundParams {
    pub pairs: usize,
    pub runs: usize,
    pub kappa: Option<f64>,
}

impl Default for DBoundParams {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            runs: 2,
            kappa: None,
        }
    }
}

impl DBoundParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(self.pairs >= 10_000, "pairs", "must be >= 10000")?;
        require(self.runs >= 1, "runs", "must be >= 1")?;
        require(self.kappa.is_none_or(|k| k > 0.0), "kappa", "must be > 0")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DBoundResult {
    pub d_0_1: f64,
    pub reports: Vec<DBoundReport>,
    /// `max c / min c - 1` across runs.
    pub spread: f64,
}

pub fn d_bound(p: &DBoundParams, rng: RngStream) -> Result<DBoundResult> {
    p.validate()?;
    let kappa = p.kappa.unwrap_or_else(kappa_consistent);
    let reports = (0..p.runs)
        .map(|i| verify_d_interpolation(p.pairs, kappa, rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let cs: Vec<f64> = reports.iter().map(|r| r.c).collect();
    let spread = cs.iter().copied().fold(0.0, f64::max)
        / cs.iter().copied().fold(f64::INFINITY, f64::min)
        - 1.0;
    Ok(DBoundResult {
        d_0_1: canonical_distance_t(0.0, 1.0, kappa)?,
        reports,
        spread,
    })
}

pub(crate) fn d_bound_outcome(p: &DBoundParams, target: &str, rng: RngStream) -> Result<Outcome> {
    let r = d_bound(p, rng)?;
    let rows = r.reports.iter().enumerate().map(|(i, rep)| {
        let lips = rep
            .lipschitz
            .iter()
            .map(|(_, c)| format!("{c:e}"))
            .collect::<Vec<_>>()
            .join(",");
        format!("{i},{},{:e},{lips},{}", rep.pairs, rep.c, rep.violations)
    });
    let csv = csv_file(
        "d_bound.csv",
        target,
        "run,pairs,c,c_eta_0.1,c_eta_0.5,violations",
        rows,
    );
    let mut summary: Vec<SummaryRow> = r
        .reports
        .iter()
        .enumerate()
        .map(|(i, rep)| {
            SummaryRow::new(
                format!("c (run {i})"),
                format!("{:.5}", rep.c),
                format!(">= d(0,1) = {:.5}", r.d_0_1),
            )
        })
        .collect();
    summary.push(SummaryRow::new(
        "relative spread of c",
        format!("{:.4}", r.spread),
        "<= 0.05",
    ));
    Ok(Outcome {
        files: vec![csv, json_file("result.json", target, &r)?],
        summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HzGapParams {
    pub t_list: Vec<f64>,
}

impl Default for HzGapParams {
    fn default() -> Self {
        Self {
            t_list: vec![1e-4, 1e-3, 1e-2, 0.1, 1.0],
        }
    }
}

impl HzGapParams {
    pub(crate) fn validate(&self) -> Result<()> {
        require(!self.t_list.is_empty(), "t_list", "must not be empty")?;
        require(
            self.t_list.iter().all(|&t| (0.0..=1.0).contains(&t)),
            "t_list",
            "entries must lie in [0, 1]",
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HzGapRow {
    pub t: f64,
    pub gap_variance: f64,
    /// `cov_H(t,t) - 2 E[H Z] + Var Z`, the cancelling form kept as a cross-check.
    pub subtraction_form: f64,
    /// `gap_variance / (5 t)`.
    pub ratio: f64,
}

/// Exact `Var(H(t,0) - Z(t,0))` against `5t`; errors if the bound fails anywhere.
pub fn hz_gap_report(t_list: &[f64]) -> Result<Vec<HzGapRow>> {
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t must lie in [0, 1], got {t}")));
        }
        let gap = hz_gap_variance(t)?;
        let subtraction = if t == 0.0 {
            0.0
        } else {
            cov_h(t, t)? - 2.0 * hz_cross_covariance(t)? + var_z_exact(t)?
        };
        let ratio = if t == 0.0 { 0.0 } else { gap / (5.0 * t) };
        if ratio > 1.0 {
            return Err(Error::BoundViolation(format!(
                "Var(H - Z)({t}) = {gap:e} exceeds 5t"
            )));
        }
        rows.push(HzGapRow {
            t,
            gap_variance: gap,
            subtraction_form: subtraction,
            ratio,
        });
    }
    Ok(rows)
}

pub(crate) fn hz_gap_outcome(p: &HzGapParams, target: &str) -> Result<Outcome> {
    p.validate()?;
    let rows = hz_gap_report(&p.t_list)?;
    let csv = csv_file(
        "hz_gap.csv",
        target,
        "t,gap_variance,subtraction_form,ratio",
        rows.iter().map(|r| {
            format!(
                "{:e},{:e},{:e},{:e}",
                r.t, r.gap_variance, r.subtraction_form, r.ratio
            )
        }),
    );
    let summary = rows
        .iter()
        .map(|r| {
            SummaryRow::new(
                format!("Var(H-Z)/(5t) at t = {:e}", r.t),
                format!("{:.4e}", r.ratio),
                "<= 1",
            )
        })
        .collect();
    #[derive(Serialize)]
    struct Rows<'a> {
        rows: &'a [HzGapRow],
    }
    Ok(Outcome {
        files: vec![
            csv,
            json_file("result.json", target, &Rows { rows: &rows })?,
        ],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hz_gap_rows_respect_the_bound() {
        let rows = hz_gap_report(&[0.0, 0.01, 0.1, 1.0]).unwrap();
        assert_eq!(rows[0].gap_variance, 0.0);
        for r in &rows[1..] {
            assert!(r.ratio <= 1.0 && r.ratio > 0.0);
            assert!((r.subtraction_form - r.gap_variance).abs() < 1e-6, "{r:?}");
        }
        assert!(hz_gap_report(&[2.0]).is_err());
    }

    #[test]
    fn l_solver_inverts_the_bound() {
        let l = solve_l(0.05, 100.0);
        assert!((l / 0.05 + l.ln() - 100.0).abs() < 1e-9);
        assert_eq!(solve_l(0.5, 1.0), 1.0);
    }

    #[test]
    fn control_error_vanishes_and_rates_are_reported() {
        let p = LocalizationParams {
            spde: SpdeConfig {
                m: 32,
                dt: 1e-4,
                ..LocalizationParams::default().spde
            },
            t_list: vec![1e-2, 1e-3],
            replicas: 100,
            control_replicas: 2,
        };
        let r = localization_rate(&p, RngStream::new(4, 0)).unwrap();
        assert!(r.control_max_error < 1e-12, "{}", r.control_max_error);
        assert!(r.median_ratio.is_finite() && r.median_ratio > 0.0);
    }

    #[test]
    fn entropy_counts_and_d_bound() {
        let r = entropy(&EntropyParams::default(), RngStream::new(2, 0)).unwrap();
        assert!(r.c_fitted && r.worst_step_ratio <= 1.0 + 1e-12);
        assert!(r.max_scaled_count < 3.0);
        let d = d_bound(&DBoundParams::default(), RngStream::new(2, 0)).unwrap();
        assert!(d.spread <= 0.05);
        assert!(d.reports.iter().all(|r| r.violations == 0));
    }
}
