use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::ensemble::{PathEnsemble, Provenance};
use super::fill_rows;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::ProcessKind;
use crate::rng::{fill_normal, RngStream};

/// Circulant embedding of fractional Gaussian noise on a uniform grid.
///
/// The latent vector has `2M` entries (real and imaginary parts of the
/// spectral coefficients); the path is the cumulative sum of the real part
/// of their transform.
pub struct FbmCirculant {
    grid: TimeGrid,
    hurst: f64,
    increments: usize,
    sqrt_eig: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
    min_eigenvalue: f64,
}

impl std::fmt::Debug for FbmCirculant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbmCirculant")
            .field("hurst", &self.hurst)
            .field("points", &self.grid.n())
            .field("embedding", &self.sqrt_eig.len())
            .finish()
    }
}

fn fgn_autocov(k: usize, hurst: f64) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

impl FbmCirculant {
    pub fn new(grid: &TimeGrid, hurst: f64) -> Result<Self> {
        let dt = grid
            .dt()
            .ok_or_else(|| Error::Domain("circulant embedding needs a uniform grid".into()))?;
        if grid.start() != 0.0 {
            return Err(Error::Domain("fBm grid must start at 0".into()));
        }
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::Domain(format!(
                "Hurst index must lie in (0,1), got {hurst}"
            )));
        }
        let increments = grid.n() - 1;
        let m = 2 * increments;
        let mut row: Vec<Complex64> = (0..m)
            .map(|j| {
                let lag = if j <= increments { j } else { m - j };
                Complex64::new(fgn_autocov(lag, hurst), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(m).process(&mut row);
        let max = row.iter().fold(0.0f64, |a, c| a.max(c.re));
        let min = row.iter().fold(f64::INFINITY, |a, c| a.min(c.re));
        if min < -1e-9 * max {
            return Err(Error::EmbeddingNotPsd { min, max });
        }
        let sqrt_eig = row
            .iter()
            .map(|c| (c.re.max(0.0) / m as f64).sqrt())
            .collect();
        Ok(Self {
            grid: grid.clone(),
            hurst,
            increments,
            sqrt_eig,
            fft: planner.plan_fft_forward(m),
            scale: dt.powf(hurst),
            min_eigenvalue: min,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.sqrt_eig.len()
    }

    /// Map a standard normal latent vector to a path with `path[0] = 0`.
    pub fn map_latent(&self, z: &[f64], work: &mut Vec<Complex64>, out: &mut [f64]) {
        self.spectral_transform(z, work);
        out[0] = 0.0;
        let mut acc = 0.0;
        for i in 0..self.increments {
            acc += work[i].re;
            out[i + 1] = acc * self.scale;
        }
    }

    /// Leave the unscaled increments in the real parts of `work[..n-1]`.
    pub fn spectral_transform(&self, z: &[f64], work: &mut Vec<Complex64>) {
        let m = self.sqrt_eig.len();
        work.clear();
        work.extend(
            self.sqrt_eig
                .iter()
                .enumerate()
                .map(|(k, s)| Complex64::new(s * z[k], s * z[m + k])),
        );
        self.fft.process(work);
    }

    /// Factor `dt^H` turning unit-spacing increments into grid increments.
    pub fn increment_scale(&self) -> f64 {
        self.scale
    }
}

/// Exact fractional Brownian motion of index 1/4 on a uniform grid from 0.
pub fn sample_fbm14(grid: &TimeGrid, count: usize, rng: RngStream) -> Result<PathEnsemble> {
    let sampler = FbmCirculant::new(grid, 0.25)?;
    let n = grid.n();
    let mut data = vec![0.0; count * n];
    fill_rows(&mut data, n, rng, |r, row| {
        let mut z = vec![0.0; sampler.latent_dim()];
        fill_normal(r, &mut z);
        let mut work = Vec::new();
        sampler.map_latent(&z, &mut work, row);
    });
    PathEnsemble::from_rows(
        grid.clone(),
        ProcessKind::FFbm14,
        Provenance {
            base: rng,
            count: count as u64,
        },
        data,
    )
}
