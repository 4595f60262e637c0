//! Gaussian paths in a coarse-to-fine latent basis, with exact single
//! coordinate updates restricted to a sup-norm ball.
//!
//! The path is `X = sum_j z_j a_j` with i.i.d. standard normal `z_j`, where
//! `a_j` are the columns of the Cholesky factor taken in bisection order.
//! For Brownian motion these are the Schauder tents. Given the other
//! coordinates, the event `max_k |X_k| < level` confines `z_j` to an
//! interval, so its conditional law is a truncated normal.

use std::f64::consts::SQRT_2;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::fill_normal;

struct Column {
    start: usize,
    values: Vec<f64>,
    /// `1/values`, or 0 where a value is 0.
    inverse: Vec<f64>,
    /// Whether every point in the support is constrained.
    all_constrained: bool,
}

impl Column {
    fn new(start: usize, values: Vec<f64>) -> Self {
        let inverse = values
            .iter()
            .map(|&a| if a == 0.0 { 0.0 } else { 1.0 / a })
            .collect();
        Self {
            start,
            values,
            inverse,
            all_constrained: false,
        }
    }
}

/// A centered Gaussian vector on grid points with a mask of the points that
/// enter the sup-norm.
pub struct PathLaw {
    columns: Vec<Column>,
    constrained: Vec<bool>,
}

/// Positions `0..k` in coarse-to-fine order: the last one, then midpoints.
fn bisection_order(k: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(k);
    if k == 0 {
        return order;
    }
    order.push(k - 1);
    let mut queue = std::collections::VecDeque::from([(-1i64, k as i64 - 1)]);
    while let Some((lo, hi)) = queue.pop_front() {
        let mid = lo + (hi - lo) / 2;
        if mid > lo && mid < hi {
            order.push(mid as usize);
            queue.push_back((lo, mid));
            queue.push_back((mid, hi));
        }
    }
    order
}

impl PathLaw {
    /// Brownian motion on `grid` (first point 0), constrained on the grid
    /// indices in `window`.
    pub fn brownian(grid: &TimeGrid, window: Range<usize>) -> Result<Self> {
        if grid.start() != 0.0 {
            return Err(Error::Domain(
                "Brownian law expects a grid starting at 0".into(),
            ));
        }
        let t = grid.points();
        let n = t.len();
        let mut columns = Vec::with_capacity(n - 1);
        let last = n - 1;
        columns.push(Column::new(
            1,
            t[1..].iter().map(|&s| s / t[last].sqrt()).collect(),
        ));
        let mut queue = std::collections::VecDeque::from([(0usize, last)]);
        while let Some((l, r)) = queue.pop_front() {
            if r - l < 2 {
                continue;
            }
            let m = l + (r - l) / 2;
            let (left, right) = (t[m] - t[l], t[r] - t[m]);
            let sd = (left * right / (t[r] - t[l])).sqrt();
            let values = (l + 1..r)
                .map(|k| {
                    if k <= m {
                        sd * (t[k] - t[l]) / left
                    } else {
                        sd * (t[r] - t[k]) / right
                    }
                })
                .collect();
            columns.push(Column::new(l + 1, values));
            queue.push_back((l, m));
            queue.push_back((m, r));
        }
        Ok(Self::finish(
            columns,
            (0..n).map(|i| window.contains(&i)).collect(),
        ))
    }

    /// General covariance matrix over grid points; zero-variance points stay at 0.
    pub fn dense(cov: &DMatrix<f64>, window: Range<usize>) -> Result<Self> {
        let n = cov.nrows();
        let max_diag = (0..n).fold(0.0f64, |a, i| a.max(cov[(i, i)]));
        let active: Vec<usize> = (0..n)
            .filter(|&i| cov[(i, i)] > 1e-15 * max_diag && cov[(i, i)] > 0.0)
            .collect();
        let k = active.len();
        if k == 0 {
            return Err(Error::Domain(
                "covariance has no non-degenerate point".into(),
            ));
        }
        let order: Vec<usize> = bisection_order(k).into_iter().map(|p| active[p]).collect();
        let sub = DMatrix::from_fn(k, k, |i, j| cov[(order[i], order[j])]);
        let scale = sub.trace() / k as f64;
        let chol = [0.0, 1e-15, 1e-14, 1e-13, 1e-12]
            .iter()
            .find_map(|&f| {
                let mut m = sub.clone();
                for i in 0..k {
                    m[(i, i)] += f * scale;
                }
                m.cholesky()
            })
            .ok_or_else(|| {
                Error::NotPsd(
                    "covariance too ill-conditioned for a Cholesky basis; use the pcn kernel"
                        .into(),
                )
            })?;
        let l = chol.l();
        let floor = 1e-14 * scale.sqrt();
        let columns = (0..k)
            .map(|j| {
                let mut full = vec![0.0; n];
                for i in j..k {
                    full[order[i]] = l[(i, j)];
                }
                let first = full.iter().position(|v| v.abs() > floor).unwrap_or(0);
                let last = full
                    .iter()
                    .rposition(|v| v.abs() > floor)
                    .map_or(first, |p| p + 1);
                Column::new(first, full[first..last.max(first)].to_vec())
            })
            .collect();
        Ok(Self::finish(
            columns,
            (0..n).map(|i| window.contains(&i)).collect(),
        ))
    }

    fn finish(mut columns: Vec<Column>, constrained: Vec<bool>) -> Self {
        for c in &mut columns {
            c.all_constrained = constrained[c.start..c.start + c.values.len()]
                .iter()
                .all(|&b| b);
        }
        Self {
            columns,
            constrained,
        }
    }

    /// Number of latent coordinates.
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn points(&self) -> usize {
        self.constrained.len()
    }

    /// Path values `X = sum_j z_j a_j`.
    pub fn path(&self, z: &[f64], x: &mut Vec<f64>) {
        x.clear();
        x.resize(self.points(), 0.0);
        for (c, zj) in self.columns.iter().zip(z) {
            for (xk, a) in x[c.start..c.start + c.values.len()]
                .iter_mut()
                .zip(&c.values)
            {
                *xk += zj * a;
            }
        }
    }

    pub fn sample_latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        fill_normal(rng, &mut z);
        z
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.constrained)
            .filter(|(_, &c)| c)
            .fold(0.0f64, |a, (v, _)| a.max(v.abs()))
    }

    /// One coarse-to-fine sweep of exact conditional updates of `z`, keeping
    /// every constrained value of `x` (the path of `z`) inside `(-level, level)`.
    pub fn sweep(&self, z: &mut [f64], x: &mut [f64], level: f64, rng: &mut ChaCha8Rng) {
        for (j, c) in self.columns.iter().enumerate() {
            let range = c.start..c.start + c.values.len();
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let xs = &x[range.clone()];
            let zj = z[j];
            let mut tighten = |xk: f64, a: f64, inv: f64| {
                // z_j + (+-level - x_k) / a bounds the coordinate.
                let (p, q) = (zj + (-level - xk) * inv, zj + (level - xk) * inv);
                let (p, q) = if a > 0.0 { (p, q) } else { (q, p) };
                lo = lo.max(p);
                hi = hi.min(q);
            };
            if c.all_constrained {
                for ((&xk, &a), &inv) in xs.iter().zip(&c.values).zip(&c.inverse) {
                    if a != 0.0 {
                        tighten(xk, a, inv);
                    }
                }
            } else {
                for (((&xk, &a), &inv), &con) in xs
                    .iter()
                    .zip(&c.values)
                    .zip(&c.inverse)
                    .zip(&self.constrained[range.clone()])
                {
                    if con && a != 0.0 {
                        tighten(xk, a, inv);
                    }
                }
            }
            if !(lo < hi) {
                continue;
            }
            let new = truncated_standard(lo, hi, rng);
            let delta = new - z[j];
            if delta == 0.0 || !new.is_finite() {
                continue;
            }
            let mut ok = true;
            for ((xk, &a), &con) in x[range.clone()]
                .iter_mut()
                .zip(&c.values)
                .zip(&self.constrained[range.clone()])
            {
                *xk += delta * a;
                ok &= !con || xk.abs() < level;
            }
            if ok {
                z[j] = new;
            } else {
                for (xk, &a) in x[range.clone()].iter_mut().zip(&c.values) {
                    *xk -= delta * a;
                }
            }
        }
    }
}

/// Upper tail `P{N > a}`.
fn upper(a: f64) -> f64 {
    0.5 * erfc(a / SQRT_2)
}

/// Inverse of [`upper`] on `(0, 1)`.
fn upper_inv(p: f64) -> f64 {
    if p < 0.5 {
        SQRT_2 * erfc_inv(2.0 * p)
    } else {
        -SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    }
}

/// Standard normal restricted to `(a, b)`: rejection for wide intervals,
/// tail-stable inversion otherwise, exponential proposals deep in a tail.
pub(crate) fn truncated_standard(a: f64, b: f64, rng: &mut ChaCha8Rng) -> f64 {
    if a < -0.25 && b > 0.25 {
        // At least a fifth of the mass: plain rejection is cheapest.
        loop {
            let z = crate::rng::normal(rng);
            if z > a && z < b {
                return z;
            }
        }
    }
    if a >= 0.0 {
        let (pa, pb) = (upper(a), upper(b));
        if pa > 1e-290 && pa - pb > 1e-12 * pa {
            let u: f64 = rng.random();
            return upper_inv(pb + u * (pa - pb)).clamp(a, b);
        }
        if pa <= 1e-290 {
            loop {
                let u: f64 = rng.random();
                let z = a - (1.0 - u).ln() / a;
                if z < b && rng.random::<f64>() < (-0.5 * (z - a) * (z - a)).exp() {
                    return z;
                }
            }
        }
        // Interval much narrower than the local scale: uniform proposal.
        loop {
            let z = a + rng.random::<f64>() * (b - a);
            if rng.random::<f64>() < (-0.5 * (z * z - a * a)).exp() {
                return z;
            }
        }
    }
    if b <= 0.0 {
        return -truncated_standard(-b, -a, rng);
    }
    let (pa, pb) = (1.0 - upper(a), 1.0 - upper(b));
    let u: f64 = rng.random();
    let p = pa + u * (pb - pa);
    upper_inv(1.0 - p).clamp(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::CovKernel;
    use crate::rng::RngStream;
    use crate::stats::{mean, variance};

    #[test]
    fn truncated_normal_moments() {
        let mut rng = RngStream::new(3, 0).rng();
        for (a, b) in [(-1.0, 1.0), (2.0, 3.0), (-4.0, -3.5), (8.0, 30.0)] {
            let xs: Vec<f64> = (0..40_000)
                .map(|_| truncated_standard(a, b, &mut rng))
                .collect();
            assert!(xs.iter().all(|&x| x >= a && x <= b));
            // Exact mean of the truncated law.
            let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let z = upper(a) - upper(b);
            let exact = (phi(a) - phi(b)) / z;
            let se = (variance(&xs) / xs.len() as f64).sqrt();
            assert!(
                (mean(&xs) - exact).abs() < 5.0 * se + 1e-9,
                "({a},{b}): {} vs {exact}",
                mean(&xs)
            );
        }
    }

    #[test]
    fn bisection_order_is_a_permutation() {
        for k in [1, 2, 3, 8, 9, 100] {
            let mut o = bisection_order(k);
            assert_eq!(o[0], k - 1);
            o.sort();
            assert_eq!(o, (0..k).collect::<Vec<_>>());
        }
    }

    fn covariance_of(law: &PathLaw) -> DMatrix<f64> {
        let n = law.points();
        DMatrix::from_fn(n, n, |i, k| {
            law.columns
                .iter()
                .map(|c| {
                    let get = |p: usize| {
                        if p >= c.start && p < c.start + c.values.len() {
                            c.values[p - c.start]
                        } else {
                            0.0
                        }
                    };
                    get(i) * get(k)
                })
                .sum()
        })
    }

    #[test]
    fn bases_reproduce_covariances() {
        let g = TimeGrid::uniform(1.0, 13).unwrap();
        let bm = PathLaw::brownian(&g, 0..13).unwrap();
        let exact = CovKernel::Bm.matrix(g.points()).unwrap();
        assert!((covariance_of(&bm) - &exact).abs().max() < 1e-14);
        let cov = CovKernel::FFbm14.matrix(g.points()).unwrap();
        let f = PathLaw::dense(&cov, 0..13).unwrap();
        assert_eq!(f.dim(), 12);
        assert!((covariance_of(&f) - &cov).abs().max() < 1e-12);
    }

    #[test]
    fn unconstrained_sweeps_preserve_the_law() {
        let g = TimeGrid::uniform(1.0, 9).unwrap();
        let cov = CovKernel::FFbm14.matrix(g.points()).unwrap();
        let law = PathLaw::dense(&cov, 0..9).unwrap();
        let mut rng = RngStream::new(4, 0).rng();
        let mut x = Vec::new();
        let reps = 20_000;
        let mut sq = 0.0;
        for _ in 0..reps {
            let mut z = law.sample_latent(&mut rng);
            law.path(&z, &mut x);
            law.sweep(&mut z, &mut x, f64::INFINITY, &mut rng);
            sq += x[8] * x[8];
        }
        let v = sq / reps as f64;
        let target = cov[(8, 8)];
        assert!(
            (v / target - 1.0).abs() < 4.0 * (2.0 / reps as f64).sqrt(),
            "{v} vs {target}"
        );
    }

    #[test]
    fn sweeps_respect_the_level_and_track_the_path() {
        let g = TimeGrid::uniform(1.0, 65).unwrap();
        let law = PathLaw::brownian(&g, 0..65).unwrap();
        let mut rng = RngStream::new(5, 0).rng();
        let mut z = vec![0.0; law.dim()];
        let mut x = Vec::new();
        law.path(&z, &mut x);
        for _ in 0..50 {
            law.sweep(&mut z, &mut x, 0.3, &mut rng);
            assert!(law.score(&x) < 0.3);
        }
        let mut fresh = Vec::new();
        law.path(&z, &mut fresh);
        assert!(x.iter().zip(&fresh).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
