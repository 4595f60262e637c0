use serde::{Deserialize, Serialize};

use super::splitting::{estimate_splitting, SplittingConfig};
use super::{EstimateRecord, ProcessSpec, SmallBallQuery};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::samplers::{LocalizedField, LocalizedSpec};
use crate::spde::log_plus;
use crate::stats::weighted_line;

/// Level `k = floor(q log2 m)` of the slowed-down dyadic grid used at index `m`.
pub fn slowed_level(m: usize, q: f64) -> usize {
    if m <= 1 || q <= 0.0 {
        return 0;
    }
    // Nudge so exact powers of two land on the right side of the floor.
    (q * (m as f64).log2() + 1e-12).floor() as usize
}

/// `|{ j 2^-k : 0 <= j <= theta 2^k }|`.
pub fn dyadic_count(k: usize, theta: f64) -> u64 {
    (theta * 2f64.powi(k as i32)).floor() as u64 + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinGridConfig {
    pub n: usize,
    pub alpha: f64,
    pub q: f64,
    pub gamma: f64,
    pub theta: f64,
    /// Constant `c` in the single-site law `log P{sup |H| <= r} ~ -c r^-4`.
    pub constant: f64,
    /// Time points per site on the window `[t_{n+1}, t_n]`.
    pub points: usize,
    pub splitting: SplittingConfig,
}

impl MinGridConfig {
    /// Upper end of the admissible range of `gamma`.
    pub fn gamma_max(&self) -> f64 {
        if self.q <= 0.0 {
            f64::INFINITY
        } else {
            (self.constant * (1.0 + self.alpha) / self.q).powf(0.25)
        }
    }

    pub fn predicted_exponent(&self) -> f64 {
        -(self.constant * (1.0 + self.alpha) / self.gamma.powi(4) - self.q)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinGridResult {
    pub n: usize,
    pub sites: u64,
    /// Single-site radius in units of `t_n^(1/4)`.
    pub radius: f64,
    pub single_site: EstimateRecord,
    pub log_p: f64,
    pub log_ci_lo: f64,
    pub log_ci_hi: f64,
    pub predicted_exponent: f64,
    pub gamma_max: f64,
}

/// `log(1 - (1 - p)^k)` from `log p`, stable for tiny `p`.
fn log_any(log_p1: f64, k: u64) -> f64 {
    if log_p1 == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let inner = k as f64 * (-log_p1.exp()).ln_1p();
    if inner > -1e-300 {
        // (1-p)^k ~ 1 - k p
        log_p1 + (k as f64).ln()
    } else {
        (-inner.exp_m1()).ln()
    }
}

/// Probability that at least one site of the slowed dyadic grid keeps the
/// localized field within `gamma psi(t_n)` over `[t_{n+1}, t_n]`, using
/// independence of the sites.
pub fn min_grid_experiment(cfg: &MinGridConfig, rng: RngStream) -> Result<MinGridResult> {
    let gamma_max = cfg.gamma_max();
    if !(cfg.gamma > 0.0 && cfg.gamma < gamma_max) {
        return Err(Error::GammaOutOfRange {
            gamma: cfg.gamma,
            max: gamma_max,
        });
    }
    if !(cfg.theta > 0.0) || cfg.q < 0.0 {
        return Err(Error::Domain("theta must be > 0 and q >= 0".into()));
    }
    let spec = LocalizedSpec::new(LocalizedField::IN, cfg.n, cfg.alpha)?;
    let level_exp = (cfg.n as f64).powf(1.0 + cfg.alpha);
    // log_+(1/t_n) without forming t_n.
    let radius = cfg.gamma / level_exp.max(log_plus(0.0)).ln().powf(0.25);
    let sites = dyadic_count(slowed_level(cfg.n, cfg.q), cfg.theta);
    let query = SmallBallQuery::new(
        ProcessSpec::Localized {
            field: spec.field,
            n: spec.n,
            alpha: spec.alpha,
        },
        radius,
        [spec.window_ratio(), 1.0],
        cfg.points,
    )?;
    let single = estimate_splitting(&query, &cfg.splitting, rng)?;
    Ok(MinGridResult {
        n: cfg.n,
        sites,
        radius,
        log_p: log_any(single.log_p, sites),
        log_ci_lo: log_any(single.log_ci_lo, sites),
        log_ci_hi: log_any(single.log_ci_hi, sites),
        single_site: single,
        predicted_exponent: cfg.predicted_exponent(),
        gamma_max,
    })
}

/// Weighted slope of `log p` against `log n`, with its standard error.
pub fn exponent_slope(results: &[MinGridResult]) -> Result<(f64, f64)> {
    let x: Vec<f64> = results.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = results.iter().map(|r| r.log_p).collect();
    let w: Vec<f64> = results
        .iter()
        .map(|r| {
            let hw = 0.5 * (r.log_ci_hi - r.log_ci_lo);
            if hw.is_finite() && hw > 0.0 {
                hw.powi(-2)
            } else {
                1.0
            }
        })
        .collect();
    let (_, b, cov) = weighted_line(&x, &y, &w)?;
    Ok((b, cov[1][1].sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slowed_grid_counts() {
        assert_eq!(slowed_level(10, 1.0), 3);
        assert_eq!(slowed_level(16, 1.0), 4);
        assert_eq!(slowed_level(40, 1.0), 5);
        assert_eq!(dyadic_count(3, 1.0), 9);
        assert_eq!(dyadic_count(4, 1.0), 17);
        assert_eq!(dyadic_count(5, 1.0), 33);
        // Constant on 2^{k/q} <= m < 2^{(k+1)/q}.
        for m in 8..16 {
            assert_eq!(slowed_level(m, 1.0), 3);
        }
        for m in 4..8 {
            assert_eq!(slowed_level(m, 0.5), 1);
        }
        assert_eq!(dyadic_count(slowed_level(1000, 0.0), 0.5), 1);
    }

    #[test]
    fn log_any_limits() {
        assert!((log_any(0.5f64.ln(), 1) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_any(-800.0, 9) - (-800.0 + 9f64.ln())).abs() < 1e-12);
        let p: f64 = 0.3;
        assert!((log_any(p.ln(), 3) - (1.0 - 0.7f64.powi(3)).ln()).abs() < 1e-14);
    }

    fn cfg(gamma: f64, q: f64) -> MinGridConfig {
        MinGridConfig {
            n: 10,
            alpha: 0.5,
            q,
            gamma,
            theta: 0.5,
            constant: 0.5,
            points: 33,
            splitting: SplittingConfig {
                particles: 100,
                rejuvenation_sweeps: 4,
                ..Default::default()
            },
        }
    }

    #[test]
    fn gamma_outside_range_is_rejected() {
        let c = cfg(2.0, 1.0);
        assert!(matches!(
            min_grid_experiment(&c, RngStream::new(0, 0)),
            Err(Error::GammaOutOfRange { .. })
        ));
    }

    #[test]
    fn single_point_grid_is_single_site() {
        let c = cfg(0.5, 0.0);
        let r = min_grid_experiment(&c, RngStream::new(1, 0)).unwrap();
        assert_eq!(r.sites, 1);
        assert_eq!(r.log_p, r.single_site.log_p);
        assert!(r.predicted_exponent < 0.0);
    }
}
