use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ensemble::{PathEnsemble, Provenance};
use super::fill_rows;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{CovKernel, ProcessKind};
use crate::rng::{fill_normal, RngStream};

/// Largest grid handled by dense factorization.
pub const MAX_DENSE_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMethod {
    Cholesky,
    Eigen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub method: FactorMethod,
    pub jitter: f64,
    pub rank: usize,
    /// Smallest eigenvalue relative to the largest (eigen route only).
    pub relative_min_eigenvalue: Option<f64>,
}

/// `Sigma = L L^T` for a covariance matrix on a grid.
///
/// Rows with zero variance (such as `t = 0` for processes started at the
/// origin) are pinned to 0 and left out of the factorization.
#[derive(Clone, Debug)]
pub struct GaussianFactor {
    n: usize,
    active: Vec<usize>,
    rank: usize,
    /// Row-major `active.len() x rank`.
    factor: Vec<f64>,
    triangular: bool,
    report: FactorReport,
}

impl GaussianFactor {
    pub fn from_kernel(kernel: &CovKernel, grid: &TimeGrid) -> Result<Self> {
        if grid.n() > MAX_DENSE_POINTS {
            return Err(Error::Domain(format!(
                "dense factorization supports at most {MAX_DENSE_POINTS} points, got {}",
                grid.n()
            )));
        }
        Self::from_matrix(&kernel.matrix(grid.points())?)
    }

    pub fn from_matrix(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if cov.ncols() != n {
            return Err(Error::Domain("covariance matrix must be square".into()));
        }
        let active: Vec<usize> = (0..n).filter(|&i| cov[(i, i)] != 0.0).collect();
        let k = active.len();
        let sub = DMatrix::from_fn(k, k, |i, j| cov[(active[i], active[j])]);
        if k == 0 {
            return Ok(Self {
                n,
                active,
                rank: 0,
                factor: Vec::new(),
                triangular: true,
                report: FactorReport {
                    method: FactorMethod::Cholesky,
                    jitter: 0.0,
                    rank: 0,
                    relative_min_eigenvalue: None,
                },
            });
        }
        let trace = sub.trace();
        let max_jitter = 1e-12 * trace / k as f64;
        for jitter in [0.0, 1e-16, 1e-15, 1e-14, 1e-13, 1e-12].map(|f| f * trace / k as f64) {
            let mut m = sub.clone();
            for i in 0..k {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let factor = (0..k)
                    .flat_map(|i| (0..k).map(move |j| (i, j)))
                    .map(|(i, j)| l[(i, j)])
                    .collect();
                debug_assert!(jitter <= max_jitter * (1.0 + 1e-12));
                return Ok(Self {
                    n,
                    active,
                    rank: k,
                    factor,
                    triangular: true,
                    report: FactorReport {
                        method: FactorMethod::Cholesky,
                        jitter,
                        rank: k,
                        relative_min_eigenvalue: None,
                    },
                });
            }
        }
        // Numerically rank-deficient kernels (smooth ones in particular) take the
        // symmetric square root instead.
        let eig = SymmetricEigen::new(sub);
        let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if min < -1e-10 * max {
            return Err(Error::NotPsd(format!(
                "smallest eigenvalue {min:e} against largest {max:e}"
            )));
        }
        let keep: Vec<usize> = (0..k)
            .filter(|&j| eig.eigenvalues[j] > 1e-14 * max)
            .collect();
        let rank = keep.len();
        let mut factor = vec![0.0; k * rank];
        for i in 0..k {
            for (c, &j) in keep.iter().enumerate() {
                factor[i * rank + c] = eig.eigenvectors[(i, j)] * eig.eigenvalues[j].sqrt();
            }
        }
        Ok(Self {
            n,
            active,
            rank,
            factor,
            triangular: false,
            report: FactorReport {
                method: FactorMethod::Eigen,
                jitter: 0.0,
                rank,
                relative_min_eigenvalue: Some(min / max),
            },
        })
    }

    pub fn report(&self) -> FactorReport {
        self.report
    }

    pub fn points(&self) -> usize {
        self.n
    }

    pub fn latent_dim(&self) -> usize {
        self.rank
    }

    /// `(L z)_row` for one grid row; pinned rows give 0.
    pub fn row_value(&self, row: usize, z: &[f64]) -> f64 {
        match self.active.binary_search(&row) {
            Ok(i) => {
                let r = self.rank;
                let coeffs = &self.factor[i * r..(i + 1) * r];
                let len = if self.triangular { i + 1 } else { r };
                coeffs[..len]
                    .iter()
                    .zip(&z[..len])
                    .map(|(a, b)| a * b)
                    .sum()
            }
            Err(_) => 0.0,
        }
    }

    /// `out = L z`, with pinned rows set to 0.
    pub fn map_latent(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let r = self.rank;
        for (i, &row) in self.active.iter().enumerate() {
            let coeffs = &self.factor[i * r..(i + 1) * r];
            let len = if self.triangular { i + 1 } else { r };
            out[row] = coeffs[..len]
                .iter()
                .zip(&z[..len])
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    /// Sample `count` rows, row `i` from stream `rng.child(i)`.
    pub fn sample_rows(&self, count: usize, rng: RngStream) -> Vec<f64> {
        let mut data = vec![0.0; count * self.n];
        fill_rows(&mut data, self.n, rng, |r, row| {
            let mut z = vec![0.0; self.rank];
            fill_normal(r, &mut z);
            self.map_latent(&z, row);
        });
        data
    }
}

/// Sample paths of any closed-form kernel by dense factorization.
pub fn sample_gaussian_path(
    kernel: &CovKernel,
    grid: &TimeGrid,
    count: usize,
    rng: RngStream,
) -> Result<(PathEnsemble, FactorReport)> {
    let factor = GaussianFactor::from_kernel(kernel, grid)?;
    let data = factor.sample_rows(count, rng);
    let ens = PathEnsemble::from_rows(
        grid.clone(),
        kernel.process(),
        Provenance {
            base: rng,
            count: count as u64,
        },
        data,
    )?;
    Ok((ens, factor.report()))
}

/// Brownian motion by cumulative sums of independent increments.
pub fn sample_brownian(grid: &TimeGrid, count: usize, rng: RngStream) -> Result<PathEnsemble> {
    if grid.start() != 0.0 {
        return Err(Error::Domain("Brownian grid must start at 0".into()));
    }
    let pts = grid.points().to_vec();
    let n = pts.len();
    let mut data = vec![0.0; count * n];
    fill_rows(&mut data, n, rng, |r, row| {
        let mut z = vec![0.0; n - 1];
        fill_normal(r, &mut z);
        row[0] = 0.0;
        for i in 1..n {
            row[i] = row[i - 1] + z[i - 1] * (pts[i] - pts[i - 1]).sqrt();
        }
    });
    PathEnsemble::from_rows(
        grid.clone(),
        ProcessKind::Bm,
        Provenance {
            base: rng,
            count: count as u64,
        },
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{cov_t, kappa_consistent};
    use crate::samplers::sample_fbm14;
    use crate::stats::ks_two_sample;

    #[test]
    fn t_sampler_matches_variance() {
        let kappa = kappa_consistent();
        let g = TimeGrid::uniform(1.0, 128).unwrap();
        let (e, rep) =
            sample_gaussian_path(&CovKernel::TAux { kappa }, &g, 20_000, RngStream::new(5, 1))
                .unwrap();
        assert!(rep.jitter <= 1e-12 * 1.0);
        let v: Vec<f64> = e.paths().map(|p| p[127] * p[127]).collect();
        let m = crate::stats::mean(&v);
        let se = (crate::stats::variance(&v) / v.len() as f64).sqrt();
        assert!((m - cov_t(1.0, 1.0, kappa).unwrap()).abs() < 3.5 * se);
        assert!(e.paths().all(|p| p[0] == 0.0));
    }

    #[test]
    fn factorized_fbm_agrees_with_circulant() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let (a, _) =
            sample_gaussian_path(&CovKernel::FFbm14, &g, 4000, RngStream::new(9, 0)).unwrap();
        let b = sample_fbm14(&g, 4000, RngStream::new(9, 1)).unwrap();
        let sup = |e: &PathEnsemble| {
            e.paths()
                .map(|p| p.iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .collect::<Vec<_>>()
        };
        let (_, p) = ks_two_sample(&sup(&a), &sup(&b));
        assert!(p > 0.001, "KS p = {p}");
    }

    #[test]
    fn zero_count_is_valid() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let (e, _) = sample_gaussian_path(&CovKernel::HFree, &g, 0, RngStream::new(0, 0)).unwrap();
        assert_eq!(e.count(), 0);
        assert_eq!(e.grid.n(), 8);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianFactor::from_matrix(&m),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn brownian_variance() {
        let g = TimeGrid::uniform(2.0, 11).unwrap();
        let e = sample_brownian(&g, 20_000, RngStream::new(2, 2)).unwrap();
        let v = e.paths().map(|p| p[10] * p[10]).sum::<f64>() / 20_000.0;
        assert!((v - 2.0).abs() < 0.08);
    }

    #[test]
    fn thread_count_does_not_change_samples() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    sample_gaussian_path(&CovKernel::HFree, &g, 64, RngStream::new(4, 4))
                        .unwrap()
                        .0
                })
        };
        assert_eq!(run(1).data(), run(4).data());
    }
}
