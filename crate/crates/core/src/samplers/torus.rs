use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::ensemble::{PathEnsemble, Provenance, SpaceTimeEnsemble};
use super::factor::GaussianFactor;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{cov_z_tail_bound, CovKernel, DecompositionFit, ProcessKind, TorusPoint};
use crate::rng::{fill_normal, RngStream};

/// Spectral sampler for the torus heat field.
///
/// Each Fourier mode is an Ornstein–Uhlenbeck process advanced with its
/// exact transition, so the law on the grid is exact for the truncated
/// series. Space points are `x_j = 2j / nx` wrapped into `[-1, 1)`.
pub struct ZTorusSampler {
    grid: TimeGrid,
    xs: Vec<f64>,
    modes: usize,
    /// `(decay, sd)` per step and mode; index `step * (modes + 1) + k`.
    transitions: Vec<(f64, f64)>,
    with_sine: bool,
    fft: Option<Arc<dyn Fft<f64>>>,
}

impl ZTorusSampler {
    pub fn new(grid: &TimeGrid, nx: usize, modes: usize) -> Result<Self> {
        if nx == 0 {
            return Err(Error::Domain("need at least one space point".into()));
        }
        if modes == 0 || 2 * modes < nx {
            return Err(Error::Domain(format!(
                "{modes} modes cannot resolve {nx} space points; need modes >= nx/2"
            )));
        }
        if grid.start() != 0.0 {
            return Err(Error::Domain("torus field grid must start at 0".into()));
        }
        let pts = grid.points();
        let mut transitions = Vec::with_capacity((pts.len() - 1) * (modes + 1));
        for w in pts.windows(2) {
            let dt = w[1] - w[0];
            transitions.push((1.0, dt.sqrt()));
            for k in 1..=modes {
                let lam = PI * PI * (k * k) as f64;
                let var = -(-2.0 * lam * dt).exp_m1() / (2.0 * lam);
                transitions.push(((-lam * dt).exp(), var.sqrt()));
            }
        }
        let xs = (0..nx)
            .map(|j| TorusPoint::new(2.0 * j as f64 / nx as f64).value())
            .collect();
        let fft = (nx > 1).then(|| FftPlanner::new().plan_fft_inverse(nx));
        Ok(Self {
            grid: grid.clone(),
            xs,
            modes,
            transitions,
            with_sine: nx > 1,
            fft,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    fn per_step(&self) -> usize {
        1 + self.modes * if self.with_sine { 2 } else { 1 }
    }

    pub fn latent_dim(&self) -> usize {
        (self.grid.n() - 1) * self.per_step()
    }

    /// Map latent normals to field values, laid out `[time][space]`.
    pub fn map_latent(&self, z: &[f64], out: &mut [f64]) {
        let nx = self.xs.len();
        self.stream_latent(z, |step, row| {
            out[step * nx..(step + 1) * nx].copy_from_slice(row);
            true
        });
    }

    /// Hand each time slice to `visit` in order; stop when it returns false.
    pub fn stream_latent<F: FnMut(usize, &[f64]) -> bool>(&self, z: &[f64], mut visit: F) {
        let nx = self.xs.len();
        let k = self.modes;
        let mut a = vec![0.0; k + 1];
        let mut b = vec![0.0; if self.with_sine { k + 1 } else { 0 }];
        let mut bins = vec![Complex64::new(0.0, 0.0); nx];
        let mut row = vec![0.0; nx];
        if !visit(0, &row) {
            return;
        }
        let step_len = self.per_step();
        for step in 0..self.grid.n() - 1 {
            let zs = &z[step * step_len..(step + 1) * step_len];
            let tr = &self.transitions[step * (k + 1)..(step + 1) * (k + 1)];
            a[0] += tr[0].1 * zs[0];
            for m in 1..=k {
                a[m] = tr[m].0 * a[m] + tr[m].1 * zs[m];
            }
            if self.with_sine {
                for m in 1..=k {
                    b[m] = tr[m].0 * b[m] + tr[m].1 * zs[k + m];
                }
            }
            if let Some(fft) = &self.fft {
                bins.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
                bins[0].re += a[0] * FRAC_1_SQRT_2;
                for m in 1..=k {
                    bins[m % nx] += Complex64::new(a[m], -b[m]);
                }
                fft.process(&mut bins);
                for (v, c) in row.iter_mut().zip(&bins) {
                    *v = c.re;
                }
            } else {
                row[0] = a[0] * FRAC_1_SQRT_2 + a[1..].iter().sum::<f64>();
            }
            if !visit(step + 1, &row) {
                return;
            }
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sample(&self, count: usize, rng: RngStream) -> SpaceTimeEnsemble {
        let width = self.grid.n() * self.xs.len();
        let mut data = vec![0.0; count * width];
        data.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
            let mut r = rng.child(i as u64).rng();
            let mut z = vec![0.0; self.latent_dim()];
            fill_normal(&mut r, &mut z);
            self.map_latent(&z, row);
        });
        SpaceTimeEnsemble::new(
            self.grid.clone(),
            self.xs.clone(),
            ProcessKind::ZTorus,
            Provenance {
                base: rng,
                count: count as u64,
            },
            cov_z_tail_bound(self.modes),
            data,
        )
    }
}

/// Exact-in-law samples of the torus heat field at `nx` equispaced points.
pub fn sample_z_torus(
    tgrid: &TimeGrid,
    nx: usize,
    modes: usize,
    count: usize,
    rng: RngStream,
) -> Result<SpaceTimeEnsemble> {
    Ok(ZTorusSampler::new(tgrid, nx, modes)?.sample(count, rng))
}

/// `H = F / amplitude - T` from independent fBm and auxiliary ensembles.
///
/// With `F` and `T` independent the result has covariance `cov_H + 2 cov_T`;
/// [`coupled_h_conditional`] draws `T` jointly with `F` and returns `H` in law.
pub fn coupled_h_from_f_t(
    f: &PathEnsemble,
    t: &PathEnsemble,
    fit: &DecompositionFit,
) -> Result<PathEnsemble> {
    if f.grid != t.grid {
        return Err(Error::GridMismatch(
            "F and T ensembles use different grids".into(),
        ));
    }
    if f.count() != t.count() {
        return Err(Error::GridMismatch(format!(
            "F has {} paths but T has {}",
            f.count(),
            t.count()
        )));
    }
    if f.process != ProcessKind::FFbm14 || t.process != ProcessKind::TAux {
        return Err(Error::Domain(
            "expected an fBm ensemble and an auxiliary ensemble".into(),
        ));
    }
    if f.provenance.overlaps(&t.provenance) {
        return Err(Error::Provenance(
            "F and T were drawn from the same streams".into(),
        ));
    }
    let data = f
        .data()
        .iter()
        .zip(t.data())
        .map(|(fv, tv)| fv / fit.amplitude - tv)
        .collect();
    PathEnsemble::from_rows(f.grid.clone(), ProcessKind::HFree, f.provenance, data)
}

/// `H = F / amplitude - T` with `T` drawn from its conditional law given `F`.
///
/// Under `F = amplitude (H + T)` with `H` and `T` independent, the pair
/// `(F, T)` is jointly Gaussian with `Cov(T, F) = amplitude cov_T`, so
/// `T | F ~ N(B F, cov_T - B amplitude cov_T)` with
/// `B = amplitude cov_T cov_F^-1`. Row `i` uses `rng.child(i)`.
pub fn coupled_h_conditional(
    f: &PathEnsemble,
    fit: &DecompositionFit,
    rng: RngStream,
) -> Result<PathEnsemble> {
    if f.process != ProcessKind::FFbm14 {
        return Err(Error::Domain("expected an fBm ensemble".into()));
    }
    if f.provenance.overlaps(&Provenance {
        base: rng,
        count: f.count() as u64,
    }) {
        return Err(Error::Provenance(
            "F and the conditional draws share streams".into(),
        ));
    }
    let pts = f.grid.points();
    let active: Vec<usize> = (0..pts.len()).filter(|&i| pts[i] > 0.0).collect();
    let k = active.len();
    let sub: Vec<f64> = active.iter().map(|&i| pts[i]).collect();
    let kt = CovKernel::TAux { kappa: fit.kappa }.matrix(&sub)?;
    let kf = CovKernel::FFbm14.matrix(&sub)?;
    let chol = kf.cholesky().ok_or_else(|| {
        Error::NotPsd("fBm covariance on the grid is not positive definite".into())
    })?;
    // B^T = cov_F^-1 (amplitude cov_T), both symmetric.
    let cross = &kt * fit.amplitude;
    let bt = chol.solve(&cross);
    let b = bt.transpose();
    let mut cond = &kt - &b * &cross;
    cond = (&cond + cond.transpose()) * 0.5;
    let factor = GaussianFactor::from_matrix(&cond)?;
    let n = pts.len();
    let mut data = vec![0.0; f.count() * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let path = f.path(i);
        let mut z = vec![0.0; factor.latent_dim()];
        fill_normal(&mut rng.child(i as u64).rng(), &mut z);
        let mut noise = vec![0.0; k];
        factor.map_latent(&z, &mut noise);
        for (a, &ia) in active.iter().enumerate() {
            let mean: f64 = active
                .iter()
                .enumerate()
                .map(|(c, &ic)| b[(a, c)] * path[ic])
                .sum();
            row[ia] = path[ia] / fit.amplitude - (mean + noise[a]);
        }
    });
    PathEnsemble::from_rows(
        f.grid.clone(),
        ProcessKind::HFree,
        Provenance {
            base: rng,
            count: f.count() as u64,
        },
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::cov_z;

    #[test]
    fn variance_matches_series_and_is_stationary() {
        let g = TimeGrid::uniform(0.2, 5).unwrap();
        let e = sample_z_torus(&g, 8, 32, 20_000, RngStream::new(8, 0)).unwrap();
        for (ti, t) in [(1usize, 0.05), (4, 0.2)] {
            for xi in [0usize, 3, 5] {
                let v: Vec<f64> = (0..e.count()).map(|p| e.value(p, ti, xi).powi(2)).collect();
                let m = crate::stats::mean(&v);
                let se = (crate::stats::variance(&v) / v.len() as f64).sqrt();
                let x = TorusPoint::new(e.xs[xi]);
                let target = cov_z(t, t, x, x, 32).unwrap();
                assert!(
                    (m - target).abs() < 3.5 * se,
                    "t={t}, x={}: {m} vs {target}",
                    e.xs[xi]
                );
            }
        }
        for xi in 0..8 {
            assert!((0..e.count()).all(|p| e.value(p, 0, xi) == 0.0));
        }
    }

    #[test]
    fn spatial_covariance_matches_series() {
        let g = TimeGrid::uniform(0.1, 3).unwrap();
        let e = sample_z_torus(&g, 4, 16, 40_000, RngStream::new(8, 1)).unwrap();
        let prod: Vec<f64> = (0..e.count())
            .map(|p| e.value(p, 2, 0) * e.value(p, 2, 1))
            .collect();
        let m = crate::stats::mean(&prod);
        let se = (crate::stats::variance(&prod) / prod.len() as f64).sqrt();
        let target = cov_z(0.1, 0.1, TorusPoint::new(0.0), TorusPoint::new(0.5), 16).unwrap();
        assert!((m - target).abs() < 4.0 * se, "{m} vs {target}");
    }

    #[test]
    fn too_few_modes_is_an_error() {
        let g = TimeGrid::uniform(0.1, 3).unwrap();
        assert!(ZTorusSampler::new(&g, 64, 16).is_err());
    }

    fn moment(e: &PathEnsemble, i: usize, j: usize) -> (f64, f64) {
        let prod: Vec<f64> = e.paths().map(|p| p[i] * p[j]).collect();
        (
            crate::stats::mean(&prod),
            (crate::stats::variance(&prod) / prod.len() as f64).sqrt(),
        )
    }

    #[test]
    fn conditional_coupling_reproduces_the_free_field() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let fit = crate::kernels::fit_decomposition(1.0, 64).unwrap();
        let f = crate::samplers::sample_fbm14(&grid, 40_000, RngStream::new(9, 0)).unwrap();
        let h = coupled_h_conditional(&f, &fit, RngStream::new(9, 1)).unwrap();
        assert!(h.paths().all(|p| p[0] == 0.0));
        let (v, se) = moment(&h, 4, 4);
        let target = crate::kernels::cov_h(1.0, 1.0).unwrap();
        assert!((v - target).abs() < 3.5 * se, "{v} vs {target}");
        let (c, se) = moment(&h, 4, 1);
        assert!((c - 0.07109).abs() < 3.5 * se, "{c}");
        assert!(coupled_h_conditional(&f, &fit, RngStream::new(9, 0)).is_err());
    }

    #[test]
    fn independent_difference_adds_twice_the_auxiliary_variance() {
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let fit = crate::kernels::fit_decomposition(1.0, 64).unwrap();
        let f = crate::samplers::sample_fbm14(&grid, 40_000, RngStream::new(10, 0)).unwrap();
        let kernel = CovKernel::TAux { kappa: fit.kappa };
        let (t, _) =
            crate::samplers::sample_gaussian_path(&kernel, &grid, 40_000, RngStream::new(10, 1))
                .unwrap();
        let h = coupled_h_from_f_t(&f, &t, &fit).unwrap();
        let (v, se) = moment(&h, 2, 2);
        let target =
            crate::kernels::cov_h(1.0, 1.0).unwrap() + 2.0 * kernel.eval(1.0, 1.0).unwrap();
        assert!((v - target).abs() < 3.5 * se, "{v} vs {target}");
    }
}
