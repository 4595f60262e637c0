use serde::{Deserialize, Serialize};

use super::EstimateRecord;
use crate::error::{Error, Result};
use crate::stats::weighted_line;

/// One input to the constant fit: a radius, its log-probability and the
/// half-width of the log-space interval (used for weighting).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub epsilon: f64,
    pub log_p: f64,
    pub half_width: f64,
}

impl From<&EstimateRecord> for FitPoint {
    fn from(r: &EstimateRecord) -> Self {
        Self {
            epsilon: r.epsilon,
            log_p: r.log_p,
            half_width: r.log_half_width(),
        }
    }
}

/// Fit of `-log p = intercept + lambda_hat * eps^(-exponent)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantFit {
    pub lambda_hat: f64,
    pub stderr: f64,
    pub exponent: f64,
    pub intercept: f64,
    pub epsilons: Vec<f64>,
    /// Exponent chosen by the free fit, when it was run.
    pub free_exponent: Option<f64>,
    pub free_lambda: Option<f64>,
}

impl ConstantFit {
    pub fn relative_stderr(&self) -> f64 {
        self.stderr / self.lambda_hat.abs()
    }
}

struct Line {
    slope: f64,
    stderr: f64,
    intercept: f64,
    chi2: f64,
}

fn fit_line(points: &[FitPoint], exponent: f64) -> Result<Line> {
    let x: Vec<f64> = points.iter().map(|p| p.epsilon.powf(-exponent)).collect();
    let y: Vec<f64> = points.iter().map(|p| -p.log_p).collect();
    let w: Vec<f64> = points
        .iter()
        .map(|p| {
            if p.half_width.is_finite() && p.half_width > 0.0 {
                p.half_width.powi(-2)
            } else {
                1.0
            }
        })
        .collect();
    let (a, b, cov) = weighted_line(&x, &y, &w)?;
    let chi2: f64 = x
        .iter()
        .zip(&y)
        .zip(&w)
        .map(|((xi, yi), wi)| wi * (yi - a - b * xi).powi(2))
        .sum();
    let dof = (points.len() as f64 - 2.0).max(1.0);
    let inflation = (chi2 / dof).max(1.0);
    Ok(Line {
        slope: b,
        stderr: (cov[1][1] * inflation).sqrt(),
        intercept: a,
        chi2,
    })
}

fn usable(points: &[FitPoint]) -> Result<Vec<FitPoint>> {
    let good: Vec<FitPoint> = points
        .iter()
        .filter(|p| p.log_p.is_finite() && p.epsilon > 0.0 && p.epsilon.is_finite())
        .copied()
        .collect();
    let mut eps: Vec<f64> = good.iter().map(|p| p.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    if eps.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "constant fit needs >= 3 distinct radii with finite log-probability, got {}",
            eps.len()
        )));
    }
    Ok(good)
}

/// Weighted fit at a fixed exponent, plus a free-exponent diagnostic
/// obtained by profiling the exponent over `[0.5, 8]`.
pub fn fit_constant(points: &[FitPoint], exponent: f64) -> Result<ConstantFit> {
    if !(exponent > 0.0) {
        return Err(Error::Domain(format!(
            "exponent must be > 0, got {exponent}"
        )));
    }
    let good = usable(points)?;
    let line = fit_line(&good, exponent)?;
    let free = free_exponent(&good).ok();
    Ok(ConstantFit {
        lambda_hat: line.slope,
        stderr: line.stderr,
        exponent,
        intercept: line.intercept,
        epsilons: good.iter().map(|p| p.epsilon).collect(),
        free_exponent: free.map(|f| f.0),
        free_lambda: free.map(|f| f.1),
    })
}

/// Exponent minimizing the weighted residual, with its slope.
pub(crate) fn free_exponent(points: &[FitPoint]) -> Result<(f64, f64)> {
    let good = usable(points)?;
    let chi2 = |k: f64| fit_line(&good, k).map(|l| l.chi2).unwrap_or(f64::INFINITY);
    let (mut lo, mut hi) = (0.5, 8.0);
    let steps = 300;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=steps {
        let k = lo + (hi - lo) * i as f64 / steps as f64;
        let c = chi2(k);
        if c < best.1 {
            best = (k, c);
        }
    }
    let h = (hi - lo) / steps as f64;
    lo = (best.0 - h).max(0.5);
    hi = (best.0 + h).min(8.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if chi2(a) < chi2(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let k = 0.5 * (lo + hi);
    Ok((k, fit_line(&good, k)?.slope))
}
