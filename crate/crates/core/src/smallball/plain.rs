use rayon::prelude::*;

use super::models::{LatentModel, Work};
use super::{EstimateRecord, Method, SmallBallQuery};
use crate::error::{Error, Result};
use crate::rng::{fill_normal, RngStream};
use crate::stats::clopper_pearson;

/// Plain Monte Carlo with an exact binomial interval.
pub fn estimate_plain(query: &SmallBallQuery, n: usize, rng: RngStream) -> Result<EstimateRecord> {
    plain_with_model(&query.model()?, query.epsilon, n, rng)
}

pub fn plain_with_model<M: LatentModel>(
    model: &M,
    epsilon: f64,
    n: usize,
    rng: RngStream,
) -> Result<EstimateRecord> {
    if n == 0 {
        return Err(Error::Domain("plain Monte Carlo needs n >= 1".into()));
    }
    let dim = model.latent_dim();
    let hits: u64 = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0; dim], Work::default()),
            |(z, work), i| {
                fill_normal(&mut rng.child(i as u64).rng(), z);
                u64::from(model.score_capped(z, work, epsilon) <= epsilon)
            },
        )
        .sum();
    let (lo, hi) = clopper_pearson(hits, n as u64, 0.05)?;
    let p = hits as f64 / n as f64;
    Ok(EstimateRecord {
        epsilon,
        p_hat: p,
        log_p: p.ln(),
        ci_lo: lo,
        ci_hi: hi,
        log_ci_lo: lo.ln(),
        log_ci_hi: hi.ln(),
        method: Method::Plain,
        n_effective: n as u64,
        cost: n as u64,
        repetitions: Vec::new(),
        acceptance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smallball::{brownian_small_ball, ProcessSpec};

    #[test]
    fn brownian_plain_matches_series() {
        let q = SmallBallQuery::new(ProcessSpec::Bm, 2.0, [0.0, 1.0], 1025).unwrap();
        let r = estimate_plain(&q, 20_000, RngStream::new(1, 0)).unwrap();
        let oracle = brownian_small_ball(2.0);
        assert!(r.ci_lo <= r.p_hat && r.p_hat <= r.ci_hi);
        // Grid maxima only make the event more likely.
        assert!(
            r.ci_lo - 0.01 <= oracle && oracle <= r.ci_hi + 0.01,
            "{r:?} vs {oracle}"
        );
    }

    #[test]
    fn huge_radius_is_certain() {
        let q = SmallBallQuery::new(ProcessSpec::Fbm14, 1e6, [0.0, 1.0], 65).unwrap();
        let r = estimate_plain(&q, 500, RngStream::new(1, 1)).unwrap();
        assert_eq!(r.p_hat, 1.0);
    }

    #[test]
    fn zero_hits_give_one_sided_interval() {
        let q = SmallBallQuery::new(ProcessSpec::Bm, 1e-3, [0.0, 1.0], 65).unwrap();
        let r = estimate_plain(&q, 200, RngStream::new(1, 2)).unwrap();
        assert_eq!(r.p_hat, 0.0);
        assert_eq!(r.log_p, f64::NEG_INFINITY);
        assert_eq!(r.ci_lo, 0.0);
        assert!(r.ci_hi > 0.0 && r.ci_hi < 0.02);
    }
}
