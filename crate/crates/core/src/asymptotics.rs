//! Deterministic checks: the quartic recursion, entropy covers of the
//! auxiliary process and the interpolation bound on its canonical distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::canonical_distance_t;
use crate::rng::RngStream;

/// `a_1 = 1`, `a_{j+1} = a_j + c a_j^{3/4}`, stored as fourth roots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecursionSeq {
    pub c: f64,
    roots: Vec<f64>,
}

/// Kahan-compensated iteration of `b -> b (1 + c/b)^{1/4}`.
fn iterate_roots(c: f64, n: usize, mut visit: impl FnMut(usize, f64)) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("c must be > 0, got {c}")));
    }
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let (mut b, mut comp) = (1.0f64, 0.0f64);
    visit(1, b);
    for j in 2..=n {
        let step = b * (0.25 * (c / b).ln_1p()).exp_m1() - comp;
        let next = b + step;
        comp = (next - b) - step;
        b = next;
        if !b.is_finite() {
            return Err(Error::Overflow(format!("a_{j} for c = {c}")));
        }
        visit(j, b);
    }
    Ok(())
}

impl RecursionSeq {
    pub fn new(c: f64, n: usize) -> Result<Self> {
        let mut roots = Vec::with_capacity(n);
        iterate_roots(c, n, |_, b| roots.push(b))?;
        Ok(Self { c, roots })
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// `a_j` (1-based); infinite once it leaves the f64 range.
    pub fn value(&self, j: usize) -> f64 {
        self.roots[j - 1].powi(4)
    }

    pub fn fourth_root(&self, j: usize) -> f64 {
        self.roots[j - 1]
    }

    pub fn ratio(&self, j: usize) -> f64 {
        (self.roots[j - 1] / (self.c * j as f64 / 4.0)).powi(4)
    }
}

/// `a_n / (c n / 4)^4`.
pub fn recursion_ratio(c: f64, n: usize) -> Result<f64> {
    let mut last = 0.0;
    iterate_roots(c, n, |_, b| last = b)?;
    let r = (last / (c * n as f64 / 4.0)).powi(4);
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::Overflow(format!("ratio at n = {n} for c = {c}")))
    }
}

/// Ratios at the requested indices, the last index at which `|ratio - 1|`
/// grew (so the approach to 1 is monotone afterwards, up to the largest index
/// requested) and the side from which it approaches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioTrend {
    pub c: f64,
    pub indices: Vec<usize>,
    pub ratios: Vec<f64>,
    pub monotone_from: usize,
    pub from_above: bool,
}

pub fn ratio_trend(c: f64, indices: &[usize]) -> Result<RatioTrend> {
    let n = indices
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Domain("no indices".into()))?;
    let mut ratios = vec![f64::NAN; indices.len()];
    let mut prev_gap = f64::INFINITY;
    let mut monotone_from = 1;
    let mut last = 1.0;
    iterate_roots(c, n, |j, b| {
        let r = (b / (c * j as f64 / 4.0)).powi(4);
        let gap = (r - 1.0).abs();
        if gap > prev_gap {
            monotone_from = j;
        }
        prev_gap = gap;
        last = r;
        for (slot, &i) in ratios.iter_mut().zip(indices) {
            if i == j {
                *slot = r;
            }
        }
    })?;
    Ok(RatioTrend {
        c,
        indices: indices.to_vec(),
        ratios,
        monotone_from,
        from_above: last > 1.0,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyCover {
    pub epsilon: f64,
    pub c: f64,
    pub kappa: f64,
    pub centers: Vec<f64>,
    pub count: usize,
    /// Largest `d(t_j, t_{j+1}) / (2 eps)` over consecutive centers.
    pub worst_ratio: f64,
}

/// Centers `t_0 = 0`, `t_j = a_j (2 eps / c)^4` until `[0, 1]` is reached, with
/// every consecutive pair checked against `d <= 2 eps`.
pub fn build_entropy_cover(epsilon: f64, c: f64, kappa: f64) -> Result<EntropyCover> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("c must be > 0, got {c}")));
    }
    let diameter = canonical_distance_t(0.0, 1.0, kappa)?;
    if 2.0 * epsilon >= diameter {
        return Ok(EntropyCover {
            epsilon,
            c,
            kappa,
            centers: vec![0.0],
            count: 1,
            worst_ratio: diameter / (2.0 * epsilon),
        });
    }
    let unit = (2.0 * epsilon / c).powi(4);
    let mut centers = vec![0.0];
    let mut worst = 0.0f64;
    let mut a = 1.0f64;
    loop {
        let t = a * unit;
        let prev = *centers.last().expect("nonempty");
        let d = canonical_distance_t(prev, t.min(1.0), kappa)?;
        let ratio = d / (2.0 * epsilon);
        if ratio > 1.0 + 1e-12 {
            return Err(Error::CoverViolation {
                j: centers.len() - 1,
                next: centers.len(),
                distance: d,
                bound: 2.0 * epsilon,
            });
        }
        worst = worst.max(ratio);
        centers.push(t);
        if t >= 1.0 {
            break;
        }
        a += c * a.powf(0.75);
    }
    let count = centers.len();
    Ok(EntropyCover {
        epsilon,
        c,
        kappa,
        centers,
        count,
        worst_ratio: worst,
    })
}

/// `|t-s|^{1/4} min(1, (|t-s| / (s ^ t))^{3/4})`.
pub fn d_bound_shape(s: f64, t: f64) -> f64 {
    let gap = (t - s).abs();
    let lo = s.min(t);
    let tail = if lo == 0.0 {
        1.0
    } else {
        (gap / lo).powf(0.75).min(1.0)
    };
    gap.powf(0.25) * tail
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DBoundReport {
    pub pairs: usize,
    pub kappa: f64,
    pub c: f64,
    /// `(eta, C_eta)` with `d(s,t) <= C_eta |t-s|` for `s, t >= eta`.
    pub lipschitz: Vec<(f64, f64)>,
    pub violations: usize,
}

pub const LIPSCHITZ_ETAS: [f64; 2] = [0.1, 0.5];

/// Smallest constants consistent with sampled pairs: `(0, 1)` plus log-uniform
/// pairs in `(1e-8, 1]^2` for the interpolation bound, uniform pairs in `[eta, 1]^2`
/// for the Lipschitz bounds.
pub fn verify_d_interpolation(pairs: usize, kappa: f64, rng: RngStream) -> Result<DBoundReport> {
    if pairs < 10_000 {
        return Err(Error::Domain(format!("need >= 1e4 pairs, got {pairs}")));
    }
    let mut r = rng.child(0).rng();
    let log_lo = 1e-8f64.ln();
    let mut sample = || (log_lo * (1.0 - r.random::<f64>())).exp();
    let mut data = Vec::with_capacity(pairs + 1);
    data.push((0.0, 1.0, canonical_distance_t(0.0, 1.0, kappa)?, 1.0));
    for _ in 0..pairs {
        let (s, t) = (sample(), sample());
        data.push((
            s,
            t,
            canonical_distance_t(s, t, kappa)?,
            d_bound_shape(s, t),
        ));
    }
    let c = data
        .iter()
        .filter(|p| p.3 > 0.0)
        .map(|p| p.2 / p.3)
        .fold(0.0f64, f64::max);
    let violations = data
        .iter()
        .filter(|p| p.2 > c * p.3 * (1.0 + 1e-12))
        .count();
    let mut lipschitz = Vec::new();
    for (k, &eta) in LIPSCHITZ_ETAS.iter().enumerate() {
        let mut r = rng.child(k as u64 + 1).rng();
        let mut best = 0.0f64;
        for _ in 0..pairs {
            let s = eta + (1.0 - eta) * r.random::<f64>();
            let t = eta + (1.0 - eta) * r.random::<f64>();
            if s != t {
                best = best.max(canonical_distance_t(s, t, kappa)? / (t - s).abs());
            }
        }
        lipschitz.push((eta, best));
    }
    Ok(DBoundReport {
        pairs,
        kappa,
        c,
        lipschitz,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kappa_consistent;
    use proptest::prelude::*;

    #[test]
    fn first_terms() {
        let s = RecursionSeq::new(4.0, 3).unwrap();
        assert_eq!(s.value(1), 1.0);
        assert!((s.value(2) - 5.0).abs() < 1e-12);
        let a3 = 5.0 + 4.0 * 5f64.powf(0.75);
        assert!((s.value(3) - a3).abs() < 1e-11, "{} vs {a3}", s.value(3));
        assert!((a3 - 18.374_81).abs() < 1e-4);
    }

    #[test]
    fn ratios_approach_one() {
        for c in [0.5, 1.0, 4.0] {
            let idx = [1_000, 10_000, 100_000, 1_000_000];
            let trend = ratio_trend(c, &idx).unwrap();
            let last = *trend.ratios.last().unwrap();
            assert!((0.95..=1.05).contains(&last), "c={c}: {last}");
            assert!(trend.monotone_from < 1_000_000);
            let past: Vec<f64> = idx
                .iter()
                .zip(&trend.ratios)
                .filter(|(i, _)| **i >= trend.monotone_from)
                .map(|(_, r)| (r - 1.0).abs())
                .collect();
            assert!(
                past.windows(2).all(|w| w[1] <= w[0]),
                "c={c}: {:?}",
                trend.ratios
            );
            assert!((recursion_ratio(c, 1_000_000).unwrap() - last).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(recursion_ratio(0.0, 10).is_err());
        assert!(recursion_ratio(1.0, 0).is_err());
        assert!(build_entropy_cover(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn cover_counts_double() {
        let kappa = kappa_consistent();
        let c = verify_d_interpolation(10_000, kappa, RngStream::new(5, 0))
            .unwrap()
            .c;
        let covers: Vec<EntropyCover> = (3..=10)
            .map(|k| build_entropy_cover(0.5f64.powi(k), c, kappa).unwrap())
            .collect();
        let counts: Vec<usize> = covers.iter().map(|cv| cv.count).collect();
        for w in counts[2..].windows(2) {
            let r = w[1] as f64 / w[0] as f64;
            assert!((1.8..=2.2).contains(&r), "{counts:?}");
        }
        let scaled: Vec<f64> = covers
            .iter()
            .map(|cv| cv.count as f64 * cv.epsilon)
            .collect();
        assert!(scaled.iter().all(|x| *x < 3.0), "{scaled:?}");
        assert!(covers.iter().all(|cv| cv.worst_ratio <= 1.0 + 1e-12));
    }

    #[test]
    fn wide_balls_need_one_center() {
        let kappa = kappa_consistent();
        let d = canonical_distance_t(0.0, 1.0, kappa).unwrap();
        let cover = build_entropy_cover(d / 2.0 + 1e-9, 0.5, kappa).unwrap();
        assert_eq!(cover.count, 1);
    }

    #[test]
    fn too_large_a_constant_breaks_the_cover() {
        let err = build_entropy_cover(0.01, 0.1, kappa_consistent()).unwrap_err();
        assert!(matches!(err, Error::CoverViolation { .. }));
    }

    #[test]
    fn interpolation_constant_is_stable() {
        let kappa = kappa_consistent();
        let a = verify_d_interpolation(10_000, kappa, RngStream::new(1, 0)).unwrap();
        let b = verify_d_interpolation(10_000, kappa, RngStream::new(2, 0)).unwrap();
        assert_eq!(a.violations, 0);
        assert!((a.c / b.c - 1.0).abs() < 0.05, "{} vs {}", a.c, b.c);
        // Pairs from 0 give exactly d(0,1) t^{1/4}.
        assert!(a.c >= canonical_distance_t(0.0, 1.0, kappa).unwrap() * 0.99);
        for ((e1, c1), (_, c2)) in a.lipschitz.iter().zip(&b.lipschitz) {
            assert!((c1 / c2 - 1.0).abs() < 0.05, "eta {e1}");
        }
    }

    #[test]
    fn shape_edge_cases() {
        assert_eq!(d_bound_shape(0.3, 0.3), 0.0);
        assert_eq!(d_bound_shape(0.0, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn sequence_is_increasing_and_superlinear(c in 0.05f64..8.0, n in 2usize..400) {
            let s = RecursionSeq::new(c, n).unwrap();
            for j in 1..n {
                prop_assert!(s.value(j + 1) > s.value(j));
            }
            for j in 1..=n {
                prop_assert!(s.value(j) >= (1.0 + c * (j - 1) as f64) * (1.0 - 1e-12));
            }
        }
    }
}
