use serde::{Deserialize, Serialize};

use super::splitting::{estimate_splitting, SplittingConfig};
use super::{EstimateRecord, ProcessSpec, SmallBallQuery};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Rate function for the moderate regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// `log |log eps|`
    LogLog,
    /// `|log eps|`
    Log,
    /// `eps^(-power)`; grows faster than `|log eps|` and is flagged as such.
    Power { power: f64 },
}

impl Phi {
    pub fn eval(self, eps: f64) -> f64 {
        match self {
            Phi::LogLog => eps.ln().abs().ln(),
            Phi::Log => eps.ln().abs(),
            Phi::Power { power } => eps.powf(-power),
        }
    }

    fn warnings(self, eps: f64) -> Vec<String> {
        let mut out = Vec::new();
        let v = self.eval(eps);
        if v > eps.ln().abs() {
            out.push(format!(
                "phi({eps:e}) = {v:.4} exceeds |log eps| = {:.4}",
                eps.ln().abs()
            ));
        }
        if let Phi::Power { power } = self {
            if power > 0.0 {
                out.push("phi grows polynomially, not O(|log eps|)".into());
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModerateRow {
    pub epsilon: f64,
    pub phi: f64,
    pub radius: f64,
    pub estimate: EstimateRecord,
    /// `log p / phi` with its interval.
    pub normalized: f64,
    pub normalized_lo: f64,
    pub normalized_hi: f64,
    pub warnings: Vec<String>,
}

/// Estimates `P{sup_[0,eps] |X| <= (eps/phi(eps))^(1/4)}` for each `eps`.
///
/// `template` fixes the process and the number of grid points; its window and
/// radius are replaced per row. For field queries the solver horizon is set
/// to `eps`, which must then be a whole number of time steps.
pub fn moderate_regime_estimate(
    template: &SmallBallQuery,
    phi: Phi,
    eps_list: &[f64],
    cfg: &SplittingConfig,
    rng: RngStream,
) -> Result<Vec<ModerateRow>> {
    let mut rows = Vec::with_capacity(eps_list.len());
    for (i, &eps) in eps_list.iter().enumerate() {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Domain(format!(
                "moderate regime needs eps in (0,1), got {eps}"
            )));
        }
        let f = phi.eval(eps);
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Domain(format!("phi({eps}) = {f} is not positive")));
        }
        let radius = (eps / f).powf(0.25);
        let mut query = SmallBallQuery {
            epsilon: radius,
            window: [0.0, eps],
            ..template.clone()
        };
        if let ProcessSpec::Spde { config, .. } = &mut query.process {
            *config = config.with_horizon(eps);
            config.validate()?;
        }
        let estimate = estimate_splitting(&query, cfg, rng.child(i as u64))?;
        rows.push(ModerateRow {
            epsilon: eps,
            phi: f,
            radius,
            normalized: estimate.log_p / f,
            normalized_lo: estimate.log_ci_lo / f,
            normalized_hi: estimate.log_ci_hi / f,
            warnings: phi.warnings(eps),
            estimate,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_values_and_warnings() {
        assert!((Phi::LogLog.eval(1e-2) - (100f64.ln()).ln()).abs() < 1e-12);
        assert!(Phi::LogLog.warnings(1e-3).is_empty());
        assert!(Phi::Log.warnings(1e-3).is_empty());
        assert!(!Phi::Power { power: 0.5 }.warnings(1e-3).is_empty());
    }

    #[test]
    fn rejects_radius_without_positive_phi() {
        let q = SmallBallQuery::new(ProcessSpec::Bm, 1.0, [0.0, 1.0], 65).unwrap();
        let cfg = SplittingConfig {
            particles: 100,
            ..Default::default()
        };
        assert!(
            moderate_regime_estimate(&q, Phi::LogLog, &[0.5], &cfg, RngStream::new(0, 0)).is_err()
        );
    }

    #[test]
    fn brownian_rows_match_scaling() {
        // For Brownian motion, P{sup_[0,e] |B| <= r} = P{sup_[0,1] |B| <= r/sqrt(e)}.
        let q = SmallBallQuery::new(ProcessSpec::Bm, 1.0, [0.0, 1.0], 513).unwrap();
        let cfg = SplittingConfig {
            particles: 100,
            rejuvenation_sweeps: 5,
            ..Default::default()
        };
        let rows =
            moderate_regime_estimate(&q, Phi::LogLog, &[1e-2], &cfg, RngStream::new(3, 0)).unwrap();
        let r = &rows[0];
        let oracle = super::super::brownian_small_ball(r.radius / 1e-2f64.sqrt()).ln();
        assert!(r.estimate.log_ci_lo - 0.3 <= oracle && oracle <= r.estimate.log_ci_hi + 0.3);
        assert!(r.warnings.is_empty());
    }
}
