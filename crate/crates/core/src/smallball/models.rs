//! Paths as deterministic maps of a standard normal latent vector.

use std::ops::Range;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{fit_decomposition, CovKernel, DecompositionFit};
use crate::samplers::{FbmCirculant, GaussianFactor, LocalizedSpec, ZTorusSampler};
use crate::spde::{integrate_u, NoiseArray, SpdeConfig, Stepper};

/// A path functional driven by i.i.d. standard normals.
pub trait LatentModel: Sync {
    fn latent_dim(&self) -> usize;

    /// Sup-norm score of the path over the query window. Once the running
    /// value exceeds `cap` the model may stop and return any value `> cap`.
    fn score_capped(&self, z: &[f64], work: &mut Work, cap: f64) -> f64;

    fn score(&self, z: &[f64], work: &mut Work) -> f64 {
        self.score_capped(z, work, f64::INFINITY)
    }
}

/// Reusable per-thread buffers.
#[derive(Default)]
pub struct Work {
    complex: Vec<Complex64>,
}

/// Brownian motion as cumulative sums.
pub struct BrownianModel {
    sd: Vec<f64>,
    window: Range<usize>,
}

impl BrownianModel {
    pub fn new(grid: &TimeGrid, window: Range<usize>) -> Result<Self> {
        check_window(grid, &window)?;
        let sd = grid
            .points()
            .windows(2)
            .map(|w| (w[1] - w[0]).sqrt())
            .collect();
        Ok(Self { sd, window })
    }
}

impl LatentModel for BrownianModel {
    fn latent_dim(&self) -> usize {
        self.sd.len()
    }

    fn score_capped(&self, z: &[f64], _work: &mut Work, cap: f64) -> f64 {
        let mut x = 0.0;
        let mut sup = if self.window.start == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        for (i, (s, zi)) in self.sd.iter().zip(z).enumerate() {
            if i + 1 >= self.window.end {
                break;
            }
            x += s * zi;
            if i + 1 >= self.window.start {
                sup = sup.max(x.abs());
                if sup > cap {
                    return sup;
                }
            }
        }
        sup
    }
}

/// Fractional Brownian motion via circulant embedding.
pub struct CirculantModel {
    sampler: FbmCirculant,
    window: Range<usize>,
}

impl CirculantModel {
    pub fn new(grid: &TimeGrid, hurst: f64, window: Range<usize>) -> Result<Self> {
        check_window(grid, &window)?;
        Ok(Self {
            sampler: FbmCirculant::new(grid, hurst)?,
            window,
        })
    }
}

impl LatentModel for CirculantModel {
    fn latent_dim(&self) -> usize {
        self.sampler.latent_dim()
    }

    fn score_capped(&self, z: &[f64], work: &mut Work, cap: f64) -> f64 {
        self.sampler.spectral_transform(z, &mut work.complex);
        let cap_unit = cap / self.sampler.increment_scale();
        let mut acc = 0.0;
        let mut sup = if self.window.start == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        for i in 1..self.window.end {
            acc += work.complex[i - 1].re;
            if i >= self.window.start {
                sup = sup.max(acc.abs());
                if sup > cap_unit {
                    break;
                }
            }
        }
        sup * self.sampler.increment_scale()
    }
}

/// Any covariance matrix through its factorization.
pub struct FactorModel {
    factor: GaussianFactor,
    window: Range<usize>,
    scale: f64,
}

impl FactorModel {
    pub fn new(factor: GaussianFactor, window: Range<usize>) -> Result<Self> {
        if window.is_empty() || window.end > factor.points() {
            return Err(Error::Domain("window outside the factorized grid".into()));
        }
        Ok(Self {
            factor,
            window,
            scale: 1.0,
        })
    }

    pub fn from_kernel(kernel: &CovKernel, grid: &TimeGrid, window: Range<usize>) -> Result<Self> {
        Self::new(GaussianFactor::from_kernel(kernel, grid)?, window)
    }

    /// Multiply every path by `scale`.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

impl LatentModel for FactorModel {
    fn latent_dim(&self) -> usize {
        self.factor.latent_dim()
    }

    fn score_capped(&self, z: &[f64], _work: &mut Work, cap: f64) -> f64 {
        let mut sup = f64::NEG_INFINITY;
        for row in self.window.clone() {
            sup = sup.max((self.scale * self.factor.row_value(row, z)).abs());
            if sup > cap {
                break;
            }
        }
        sup
    }
}

/// The free-space field at a point, built as `F / amplitude - T` from an
/// fBm and an independent auxiliary process.
pub struct CoupledHModel {
    fbm: FbmCirculant,
    aux: GaussianFactor,
    window: Range<usize>,
    amplitude: f64,
    fit: DecompositionFit,
}

impl CoupledHModel {
    pub fn new(grid: &TimeGrid, window: Range<usize>) -> Result<Self> {
        check_window(grid, &window)?;
        let fit = fit_decomposition(1.0, 64)?;
        let aux = GaussianFactor::from_kernel(&CovKernel::TAux { kappa: fit.kappa }, grid)?;
        Ok(Self {
            fbm: FbmCirculant::new(grid, 0.25)?,
            aux,
            window,
            amplitude: fit.amplitude,
            fit,
        })
    }

    pub fn fit(&self) -> &DecompositionFit {
        &self.fit
    }
}

impl LatentModel for CoupledHModel {
    fn latent_dim(&self) -> usize {
        self.fbm.latent_dim() + self.aux.latent_dim()
    }

    fn score_capped(&self, z: &[f64], work: &mut Work, cap: f64) -> f64 {
        let (zf, zt) = z.split_at(self.fbm.latent_dim());
        self.fbm.spectral_transform(zf, &mut work.complex);
        let scale = self.fbm.increment_scale() / self.amplitude;
        let mut acc = 0.0;
        let mut sup = if self.window.start == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        for i in 1..self.window.end {
            acc += work.complex[i - 1].re;
            if i >= self.window.start {
                let h = acc * scale - self.aux.row_value(i, zt);
                sup = sup.max(h.abs());
                if sup > cap {
                    break;
                }
            }
        }
        sup
    }
}

/// Torus field at one point from its Fourier modes.
pub struct TorusModel {
    sampler: ZTorusSampler,
    window: Range<usize>,
}

impl TorusModel {
    pub fn new(grid: &TimeGrid, modes: usize, window: Range<usize>) -> Result<Self> {
        check_window(grid, &window)?;
        Ok(Self {
            sampler: ZTorusSampler::new(grid, 1, modes)?,
            window,
        })
    }
}

impl LatentModel for TorusModel {
    fn latent_dim(&self) -> usize {
        self.sampler.latent_dim()
    }

    fn score_capped(&self, z: &[f64], _work: &mut Work, cap: f64) -> f64 {
        let mut sup = f64::NEG_INFINITY;
        let window = self.window.clone();
        self.sampler.stream_latent(z, |step, row| {
            if step >= window.start {
                sup = sup.max(row[0].abs());
            }
            step + 1 < window.end && sup <= cap
        });
        sup
    }
}

/// The nonlinear field at one site, a deterministic map of its driving noise.
pub struct SpdeModel {
    config: SpdeConfig,
    stepper: Stepper,
    x_index: usize,
    center: f64,
    window: Range<usize>,
}

impl SpdeModel {
    pub fn new(
        config: &SpdeConfig,
        x_index: usize,
        centering: bool,
        window: Range<usize>,
    ) -> Result<Self> {
        let stepper = Stepper::new(config)?;
        if x_index >= config.m {
            return Err(Error::Domain(format!(
                "site index {x_index} outside {} cells",
                config.m
            )));
        }
        if window.is_empty() || window.end > config.steps() + 1 {
            return Err(Error::Domain("window outside the solver time grid".into()));
        }
        let center = if centering {
            config.u0.eval(config.xs()[x_index])
        } else {
            0.0
        };
        Ok(Self {
            config: config.clone(),
            stepper,
            x_index,
            center,
            window,
        })
    }
}

impl LatentModel for SpdeModel {
    fn latent_dim(&self) -> usize {
        self.config.steps() * self.config.m
    }

    fn score_capped(&self, z: &[f64], _work: &mut Work, cap: f64) -> f64 {
        let noise = NoiseArray::from_standard(&self.config, z);
        let mut sup = f64::NEG_INFINITY;
        let window = self.window.clone();
        let res = integrate_u(&self.config, &self.stepper, &noise, |step, u| {
            if step >= window.start {
                sup = sup.max((u[self.x_index] - self.center).abs());
            }
            step + 1 < window.end && sup <= cap
        });
        match res {
            Ok(()) => sup,
            Err(_) => f64::INFINITY,
        }
    }
}

/// Localized field at a single site, in units where `t_n = 1`.
pub fn localized_model(spec: &LocalizedSpec, points: usize) -> Result<FactorModel> {
    let factor = GaussianFactor::from_matrix(&spec.scaled_matrix(points)?)?;
    FactorModel::new(factor, 0..points)
}

fn check_window(grid: &TimeGrid, window: &Range<usize>) -> Result<()> {
    if window.is_empty() || window.end > grid.n() {
        return Err(Error::Domain(format!(
            "window {:?} is empty or outside a grid of {} points",
            window,
            grid.n()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, RngStream};
    use crate::samplers::sample_gaussian_path;

    fn sup(path: &[f64], w: Range<usize>) -> f64 {
        path[w].iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn capped_scores_agree_with_full_paths() {
        let g = TimeGrid::uniform(1.0, 65).unwrap();
        let w = 3..40;
        let models: Vec<Box<dyn LatentModel>> = vec![
            Box::new(BrownianModel::new(&g, w.clone()).unwrap()),
            Box::new(CirculantModel::new(&g, 0.25, w.clone()).unwrap()),
            Box::new(FactorModel::from_kernel(&CovKernel::HFree, &g, w.clone()).unwrap()),
            Box::new(CoupledHModel::new(&g, w.clone()).unwrap()),
        ];
        let mut work = Work::default();
        for m in &models {
            let mut z = vec![0.0; m.latent_dim()];
            fill_normal(&mut RngStream::new(1, 0).rng(), &mut z);
            let full = m.score(&z, &mut work);
            assert!(full.is_finite() && full > 0.0);
            let capped = m.score_capped(&z, &mut work, full * 0.5);
            assert!(capped > full * 0.5);
            assert_eq!(m.score_capped(&z, &mut work, full), full);
        }
    }

    #[test]
    fn factor_model_matches_sampler_paths() {
        let g = TimeGrid::uniform(1.0, 33).unwrap();
        let factor = GaussianFactor::from_kernel(&CovKernel::FFbm14, &g).unwrap();
        let model = FactorModel::new(factor.clone(), 0..33).unwrap();
        let mut z = vec![0.0; factor.latent_dim()];
        fill_normal(&mut RngStream::new(2, 0).rng(), &mut z);
        let mut path = vec![0.0; 33];
        factor.map_latent(&z, &mut path);
        assert!((model.score(&z, &mut Work::default()) - sup(&path, 0..33)).abs() < 1e-14);
        let _ = sample_gaussian_path(&CovKernel::FFbm14, &g, 1, RngStream::new(0, 0)).unwrap();
    }
}
