use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use super::ensemble::{Provenance, SpaceTimeEnsemble};
use super::factor::GaussianFactor;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{cov_h, gaussian_kernel, ProcessKind};
use crate::quadrature::integrate;
use crate::rng::{fill_normal, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizedField {
    /// Noise restricted to the time window `[t_{n+1}, t)`.
    HN,
    /// Noise restricted to the time window and to `x +- sqrt(t_n |log t_n|)`.
    IN,
}

/// Scale `n` of the sequence `t_n = exp(-n^{1+alpha})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedSpec {
    pub field: LocalizedField,
    pub n: usize,
    pub alpha: f64,
}

impl LocalizedSpec {
    pub fn new(field: LocalizedField, n: usize, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("scale index n must be >= 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
        }
        if ((n + 1) as f64).powf(1.0 + alpha) > 700.0 {
            return Err(Error::Underflow { n, alpha });
        }
        Ok(Self { field, n, alpha })
    }

    fn exponent(&self, k: usize) -> f64 {
        (k as f64).powf(1.0 + self.alpha)
    }

    pub fn t_n(&self) -> f64 {
        (-self.exponent(self.n)).exp()
    }

    pub fn t_next(&self) -> f64 {
        (-self.exponent(self.n + 1)).exp()
    }

    /// `t_{n+1} / t_n`, computed without forming either.
    pub fn window_ratio(&self) -> f64 {
        (self.exponent(self.n) - self.exponent(self.n + 1)).exp()
    }

    /// Half-width `sqrt(t_n |log t_n|)` of the spatial noise window.
    pub fn half_width(&self) -> f64 {
        (self.t_n() * self.exponent(self.n)).sqrt()
    }

    pub fn grid(&self, nt: usize) -> Result<TimeGrid> {
        TimeGrid::window(self.t_next(), self.t_n(), nt)
    }

    /// Covariance in units where `t_n = 1`; multiply by `sqrt(t_n)` for physical units.
    pub fn scaled_covariance(&self, s: f64, t: f64, dx: f64) -> Result<f64> {
        let t0 = self.window_ratio();
        match self.field {
            LocalizedField::HN => Ok(hn_cov(s, t, dx, t0)),
            LocalizedField::IN => {
                if dx != 0.0 {
                    return Err(Error::Domain(
                        "I_n covariance is only needed at a single site".into(),
                    ));
                }
                in_cov(s, t, t0, self.exponent(self.n).sqrt())
            }
        }
    }

    /// Covariance matrix over `nt` window times at one site, in scaled units.
    pub fn scaled_matrix(&self, nt: usize) -> Result<DMatrix<f64>> {
        let t0 = self.window_ratio();
        let taus: Vec<f64> = (0..nt)
            .map(|i| t0 + (1.0 - t0) * i as f64 / (nt - 1) as f64)
            .collect();
        let entries: Vec<Result<f64>> = (0..nt * nt)
            .into_par_iter()
            .map(|ij| {
                let (i, j) = (ij / nt, ij % nt);
                if j > i {
                    Ok(0.0)
                } else {
                    self.scaled_covariance(taus[i], taus[j], 0.0)
                }
            })
            .collect();
        let mut m = DMatrix::zeros(nt, nt);
        for (ij, v) in entries.into_iter().enumerate() {
            let (i, j) = (ij / nt, ij % nt);
            if j <= i {
                let v = v?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }
}

/// Antiderivative in `u` of `u^{-1/2} exp(-c/u)`.
fn root_gauss_antiderivative(u: f64, c: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if c == 0.0 {
        return 2.0 * u.sqrt();
    }
    2.0 * u.sqrt() * (-c / u).exp() - 2.0 * (PI * c).sqrt() * erfc((c / u).sqrt())
}

fn hn_cov(s: f64, t: f64, dx: f64, t0: f64) -> f64 {
    if s <= t0 || t <= t0 {
        return 0.0;
    }
    let c = dx * dx / 4.0;
    let upper = s + t - 2.0 * t0;
    let lower = (t - s).abs();
    (root_gauss_antiderivative(upper, c) - root_gauss_antiderivative(lower, c))
        / (2.0 * (4.0 * PI).sqrt())
}

fn in_cov(s: f64, t: f64, t0: f64, w: f64) -> Result<f64> {
    let lo = s.min(t);
    if lo <= t0 {
        return Ok(0.0);
    }
    let gap = (t - s).abs();
    // r = lo - v^2; a = gap + v^2 and b = v^2 are the two kernel times.
    let integrand = |v: f64| {
        let b = v * v;
        let a = gap + b;
        if b == 0.0 {
            return if gap == 0.0 {
                2.0 / (8.0 * PI).sqrt()
            } else {
                0.0
            };
        }
        let sigma2 = 2.0 * a * b / (a + b);
        2.0 * v * gaussian_kernel(a + b, 0.0) * erf(w / (2.0 * sigma2).sqrt())
    };
    integrate(integrand, 0.0, (lo - t0).sqrt(), 1e-15, 1e-11)
}

/// Covariance of the localized field in physical units.
pub fn localized_covariance(spec: &LocalizedSpec, s: f64, t: f64, dx: f64) -> Result<f64> {
    let tn = spec.t_n();
    Ok(tn.sqrt() * spec.scaled_covariance(s / tn, t / tn, dx / tn.sqrt())?)
}

/// `Var(H(t,x) - H_n(t,x))`; the two parts are independent, so this is a difference of variances.
pub fn var_h_minus_hn(spec: &LocalizedSpec, t: f64) -> Result<f64> {
    let t0 = spec.t_next();
    if t < t0 {
        return Err(Error::Domain(format!(
            "t = {t} precedes the window start {t0}"
        )));
    }
    let full = cov_h(t, t)?;
    let local = ((2.0 * (t - t0)).sqrt()) / (4.0 * PI).sqrt();
    Ok((full - local).max(0.0))
}

/// Sample a localized field at the given sites over `nt` window times.
///
/// For `I_n` the sites must be at least two half-widths apart; each site
/// then draws from its own stream, which makes the sites independent.
pub fn sample_localized(
    spec: &LocalizedSpec,
    nt: usize,
    x_points: &[f64],
    count: usize,
    rng: RngStream,
) -> Result<SpaceTimeEnsemble> {
    if x_points.is_empty() {
        return Err(Error::Domain("need at least one site".into()));
    }
    let grid = spec.grid(nt)?;
    let tn = spec.t_n();
    let nx = x_points.len();
    let width = nt * nx;
    let mut data = vec![0.0; count * width];
    let process;
    match spec.field {
        LocalizedField::HN => {
            process = ProcessKind::HLocalized;
            let t0 = spec.window_ratio();
            let taus: Vec<f64> = (0..nt)
                .map(|i| t0 + (1.0 - t0) * i as f64 / (nt - 1) as f64)
                .collect();
            let cov = DMatrix::from_fn(width, width, |p, q| {
                let (ti, xi) = (p / nx, p % nx);
                let (tj, xj) = (q / nx, q % nx);
                let dx = (x_points[xi] - x_points[xj]) / tn.sqrt();
                hn_cov(taus[ti], taus[tj], dx, t0) * tn.sqrt()
            });
            let factor = GaussianFactor::from_matrix(&cov)?;
            data = factor.sample_rows(count, rng);
        }
        LocalizedField::IN => {
            process = ProcessKind::ILocalized;
            let w = spec.half_width();
            for i in 0..nx {
                for j in 0..i {
                    if (x_points[i] - x_points[j]).abs() < 2.0 * w {
                        return Err(Error::Domain(format!(
                            "sites {} and {} are closer than 2 sqrt(t_n |log t_n|) = {:e}; their noise windows overlap",
                            x_points[j], x_points[i], 2.0 * w
                        )));
                    }
                }
            }
            let mut cov = spec.scaled_matrix(nt)?;
            cov *= tn.sqrt();
            let factor = GaussianFactor::from_matrix(&cov)?;
            data.par_chunks_mut(width).enumerate().for_each(|(p, row)| {
                let mut z = vec![0.0; factor.latent_dim()];
                let mut series = vec![0.0; nt];
                for site in 0..nx {
                    let mut r = rng.child(p as u64).child(site as u64).rng();
                    fill_normal(&mut r, &mut z);
                    factor.map_latent(&z, &mut series);
                    for (ti, v) in series.iter().enumerate() {
                        row[ti * nx + site] = *v;
                    }
                }
            });
        }
    }
    Ok(SpaceTimeEnsemble::new(
        grid,
        x_points.to_vec(),
        process,
        Provenance {
            base: rng,
            count: count as u64,
        },
        0.0,
        data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hn_closed_form_matches_quadrature() {
        let t0 = 0.05;
        for &(s, t, dx) in &[(0.5, 1.0, 0.0), (0.3, 0.9, 0.4), (1.0, 1.0, 1.5)] {
            let q = integrate(
                |r| gaussian_kernel(s + t - 2.0 * r, dx),
                t0,
                f64::min(s, t) - 1e-13,
                1e-14,
                1e-12,
            );
            let closed = hn_cov(s, t, dx, t0);
            match q {
                Ok(q) => assert!((closed - q).abs() < 1e-8, "({s},{t},{dx}): {closed} vs {q}"),
                Err(_) => panic!("quadrature failed"),
            }
        }
        // Without a window the closed form reduces to the free-space covariance.
        assert!((hn_cov(0.4, 0.9, 0.0, 0.0) - cov_h(0.4, 0.9).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn variances_are_nested() {
        let h = LocalizedSpec::new(LocalizedField::HN, 3, 0.5).unwrap();
        let i = LocalizedSpec::new(LocalizedField::IN, 3, 0.5).unwrap();
        let tn = h.t_n();
        for frac in [0.3, 0.7, 1.0] {
            let t = h.t_next() + frac * (tn - h.t_next());
            let vi = localized_covariance(&i, t, t, 0.0).unwrap();
            let vh = localized_covariance(&h, t, t, 0.0).unwrap();
            let full = cov_h(t, t).unwrap();
            assert!(
                vi <= vh * (1.0 + 1e-10) && vh <= full * (1.0 + 1e-12),
                "{vi} {vh} {full}"
            );
        }
    }

    #[test]
    fn gap_variance_respects_window_bound() {
        let alpha = 0.5;
        for n in 1..=20 {
            let spec = LocalizedSpec::new(LocalizedField::HN, n, alpha).unwrap();
            let worst = var_h_minus_hn(&spec, spec.t_next()).unwrap();
            let bound = spec.t_n().sqrt() * (-(1.0 + alpha) * (n as f64).powf(alpha) / 2.0).exp();
            assert!(worst <= bound, "n={n}: {worst} > {bound}");
        }
    }

    #[test]
    fn underflow_is_reported() {
        assert!(matches!(
            LocalizedSpec::new(LocalizedField::HN, 200, 0.5),
            Err(Error::Underflow { .. })
        ));
    }

    #[test]
    fn separated_sites_are_uncorrelated() {
        let spec = LocalizedSpec::new(LocalizedField::IN, 2, 0.5).unwrap();
        let w = spec.half_width();
        let e = sample_localized(&spec, 8, &[0.0, 3.0 * w], 4000, RngStream::new(3, 3)).unwrap();
        let a: Vec<f64> = (0..e.count()).map(|p| e.value(p, 7, 0)).collect();
        let b: Vec<f64> = (0..e.count()).map(|p| e.value(p, 7, 1)).collect();
        let va = crate::stats::variance(&a);
        let vb = crate::stats::variance(&b);
        let corr =
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / e.count() as f64 / (va * vb).sqrt();
        assert!(
            corr.abs() < 3.0 / (e.count() as f64).sqrt(),
            "corr = {corr}"
        );
        assert!(sample_localized(&spec, 8, &[0.0, 0.5 * w], 1, RngStream::new(3, 3)).is_err());
    }

    #[test]
    fn hn_ensemble_variance() {
        let spec = LocalizedSpec::new(LocalizedField::HN, 2, 0.5).unwrap();
        let e = sample_localized(&spec, 6, &[0.0, 0.01], 20_000, RngStream::new(4, 0)).unwrap();
        let t = e.grid.end();
        let target = localized_covariance(&spec, t, t, 0.0).unwrap();
        let v: Vec<f64> = (0..e.count()).map(|p| e.value(p, 5, 1).powi(2)).collect();
        let se = (crate::stats::variance(&v) / v.len() as f64).sqrt();
        assert!((crate::stats::mean(&v) - target).abs() < 3.5 * se);
        assert!((0..e.count()).all(|p| e.value(p, 0, 0) == 0.0));
    }
}
