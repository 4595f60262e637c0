use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered time points on which paths are sampled.
///
/// The uniform constructor is the workhorse; windowed and geometric grids
/// are used for the localized fields and for the running-infimum statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    uniform: bool,
}

impl TimeGrid {
    /// `n` points `t_i = i * horizon / (n - 1)`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        Self::window(0.0, horizon, n)
    }

    /// `n` equispaced points from `start` to `end` inclusive.
    pub fn window(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 points, got {n}"
            )));
        }
        if !(start >= 0.0 && end > start && end.is_finite()) {
            return Err(Error::Domain(format!(
                "invalid grid window [{start}, {end}]"
            )));
        }
        let dt = (end - start) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| start + i as f64 * dt).collect();
        points[n - 1] = end;
        Ok(Self {
            points,
            uniform: true,
        })
    }

    /// `0` followed by `n - 1` geometrically spaced points in `[t_min, t_max]`.
    pub fn geometric(t_min: f64, t_max: f64, n: usize) -> Result<Self> {
        if n < 3 || !(t_min > 0.0 && t_max > t_min) {
            return Err(Error::Domain(format!(
                "geometric grid needs n >= 3 and 0 < t_min < t_max, got n={n}, [{t_min}, {t_max}]"
            )));
        }
        let ratio = (t_max / t_min).ln() / (n - 2) as f64;
        let mut points = Vec::with_capacity(n);
        points.push(0.0);
        points.extend((0..n - 1).map(|i| t_min * (ratio * i as f64).exp()));
        points[n - 1] = t_max;
        Ok(Self {
            points,
            uniform: false,
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain("grid needs at least 2 points".into()));
        }
        if points[0] < 0.0 || points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "grid points must be >= 0 and strictly increasing".into(),
            ));
        }
        Ok(Self {
            points,
            uniform: false,
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn horizon(&self) -> f64 {
        self.end()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Spacing of a uniform grid.
    pub fn dt(&self) -> Option<f64> {
        self.uniform
            .then(|| (self.end() - self.start()) / (self.n() - 1) as f64)
    }

    /// Indices of grid points inside `[lo, hi]`.
    pub fn window_indices(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let tol = 1e-12 * self.end().max(f64::MIN_POSITIVE);
        let first = self.points.partition_point(|&t| t < lo - tol);
        let last = self.points.partition_point(|&t| t <= hi + tol);
        first..last.max(first)
    }

    /// Same grid refined by inserting midpoints (uniform grids only).
    pub fn doubled(&self) -> Result<Self> {
        if !self.uniform {
            return Err(Error::Domain("only uniform grids can be refined".into()));
        }
        Self::window(self.start(), self.end(), 2 * self.n() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_invariants() {
        let g = TimeGrid::uniform(2.0, 5).unwrap();
        assert_eq!(g.points(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.dt(), Some(0.5));
        assert!(TimeGrid::uniform(1.0, 1).is_err());
        assert!(TimeGrid::uniform(-1.0, 4).is_err());
    }

    #[test]
    fn window_indices_are_inclusive() {
        let g = TimeGrid::uniform(1.0, 11).unwrap();
        assert_eq!(g.window_indices(0.0, 0.3), 0..4);
        assert_eq!(g.window_indices(0.25, 1.0), 3..11);
    }

    #[test]
    fn geometric_grid_starts_at_zero() {
        let g = TimeGrid::geometric(1e-8, 1.0, 10).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert!((g.points()[1] - 1e-8).abs() < 1e-20);
        assert_eq!(g.end(), 1.0);
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn doubling_keeps_endpoints() {
        let g = TimeGrid::uniform(1.0, 5).unwrap().doubled().unwrap();
        assert_eq!(g.n(), 9);
        assert_eq!(g.dt(), Some(0.125));
    }
}
