//! Covariance kernels, heat kernels and canonical distances.
//!
//! Every closed form here has a quadrature counterpart in the tests; the
//! closed forms are what the samplers and estimators consume.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{ensure_time, Error, Result};
use crate::quadrature::integrate;

/// Default number of Fourier modes for the torus kernel.
pub const DEFAULT_MODES: usize = 4096;

/// Prefactor of the auxiliary process as written in its defining integral.
pub const KAPPA_AS_WRITTEN: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2 pi)

/// Amplitude dividing `H + T` in the published decomposition.
pub fn amplitude_as_written() -> f64 {
    (2.0 / PI).powf(0.25)
}

/// Prefactor for which the decomposition identity holds exactly.
pub fn kappa_consistent() -> f64 {
    1.0 / (2.0 * SQRT_2 * PI).sqrt()
}

/// Point of the torus `[-1, 1)` with circumference 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint(f64);

impl TorusPoint {
    pub fn new(x: f64) -> Self {
        let mut w = x - 2.0 * ((x + 1.0) / 2.0).floor();
        if w >= 1.0 {
            w -= 2.0;
        }
        TorusPoint(w)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn distance(self, other: TorusPoint) -> f64 {
        torus_distance(self.0, other.0)
    }
}

pub fn torus_distance(x: f64, y: f64) -> f64 {
    let d = (TorusPoint::new(x).0 - TorusPoint::new(y).0).abs();
    d.min(2.0 - d)
}

/// `Delta((t,x),(s,y)) = |t-s|^{1/4} + dist(x,y)^{1/2}`.
pub fn parabolic_metric(t: f64, x: f64, s: f64, y: f64) -> f64 {
    (t - s).abs().powf(0.25) + torus_distance(x, y).sqrt()
}

/// Free-space heat kernel `G_r(a) = exp(-a^2 / 4r) / sqrt(4 pi r)`.
pub fn gaussian_kernel(r: f64, a: f64) -> f64 {
    (-a * a / (4.0 * r)).exp() / (4.0 * PI * r).sqrt()
}

/// Heat kernel of the torus: the wrapped sum of free-space kernels.
///
/// Small times sum images out to the radius where the Gaussian falls below
/// `tol`; large times switch to the Fourier series, whose terms then decay
/// faster.
pub fn heat_kernel_torus(r: f64, x: TorusPoint, y: TorusPoint, tol: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!(
            "heat kernel time must be > 0, got {r}"
        )));
    }
    if !(tol > 0.0 && tol <= 1e-6) {
        return Err(Error::Domain(format!(
            "tolerance must lie in (0, 1e-6], got {tol}"
        )));
    }
    let diff = x.0 - y.0;
    if r <= 0.5 {
        let g0 = gaussian_kernel(r, 0.0);
        let radius = (4.0 * r * (g0 / tol).ln().max(0.0)).sqrt() + 2.0;
        let n_max = ((radius + diff.abs()) / 2.0).ceil() as i64;
        let mut sum = 0.0;
        for n in -n_max..=n_max {
            let a = diff + 2.0 * n as f64;
            if a.abs() <= radius {
                sum += gaussian_kernel(r, a);
            }
        }
        Ok(sum)
    } else {
        let mut sum = 0.5;
        for k in 1.. {
            let decay = (-PI * PI * (k * k) as f64 * r).exp();
            sum += decay * (PI * k as f64 * diff).cos();
            if decay < tol * 1e-3 {
                break;
            }
        }
        Ok(sum)
    }
}

/// `E[H(s,0) H(t,0)]` for the free-space heat field.
pub fn cov_h(s: f64, t: f64) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    Ok(((s + t).sqrt() - (t - s).abs().sqrt()) / (4.0 * PI).sqrt())
}

/// Covariance of the auxiliary smooth process with prefactor `kappa`.
pub fn cov_t(s: f64, t: f64, kappa: f64) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("prefactor must be > 0, got {kappa}")));
    }
    Ok(kappa * kappa * (2.0 * PI).sqrt() * (s.sqrt() + t.sqrt() - (s + t).sqrt()))
}

/// Covariance of fractional Brownian motion with Hurst index 1/4.
pub fn cov_f(s: f64, t: f64) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    Ok((s.sqrt() + t.sqrt() - (t - s).abs().sqrt()) / 2.0)
}

pub fn cov_bm(s: f64, t: f64) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    Ok(s.min(t))
}

/// Torus heat field covariance from its Fourier modes.
///
/// The omitted tail is at most [`cov_z_tail_bound`]`(modes)`.
pub fn cov_z(s: f64, t: f64, x: TorusPoint, y: TorusPoint, modes: usize) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    if modes == 0 {
        return Err(Error::Domain("cov_z needs at least one mode".into()));
    }
    let lo = s.min(t);
    let gap = (t - s).abs();
    let diff = x.0 - y.0;
    let mut sum = lo / 2.0;
    for k in 1..=modes {
        let lam = PI * PI * (k * k) as f64;
        let decay = (-lam * gap).exp();
        if decay == 0.0 {
            break;
        }
        let build = -(-2.0 * lam * lo).exp_m1();
        sum += (PI * k as f64 * diff).cos() * decay * build / (2.0 * lam);
    }
    Ok(sum)
}

/// Upper bound on the mode tail `sum_{k > K} 1/(2 pi^2 k^2) <= 1/(2 pi^2 K)`.
pub fn cov_z_tail_bound(modes: usize) -> f64 {
    1.0 / (2.0 * PI * PI * modes as f64)
}

/// `d(s,t) = ||T(t) - T(s)||_2` for the auxiliary process.
///
/// Evaluated in a cancellation-free form so that nearby times keep full
/// relative precision.
pub fn canonical_distance_t(s: f64, t: f64, kappa: f64) -> Result<f64> {
    ensure_time("s", s)?;
    ensure_time("t", t)?;
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("prefactor must be > 0, got {kappa}")));
    }
    if s == t {
        return Ok(0.0);
    }
    let a = kappa * kappa * (2.0 * PI).sqrt();
    let (rs, rt) = (s.sqrt(), t.sqrt());
    let sum = rs + rt;
    let d2 = a * SQRT_2 * (t - s) * (t - s) / (sum * sum * ((2.0 * (s + t)).sqrt() + sum));
    Ok(d2.sqrt())
}

/// Identity of a Gaussian process with a closed-form kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    HFree,
    ZTorus,
    TAux,
    FFbm14,
    Bm,
    HLocalized,
    ILocalized,
    USpde,
}

/// A named covariance function of time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum CovKernel {
    HFree,
    ZTorus { x: f64, y: f64, modes: usize },
    TAux { kappa: f64 },
    FFbm14,
    Bm,
}

impl CovKernel {
    pub fn process(&self) -> ProcessKind {
        match self {
            CovKernel::HFree => ProcessKind::HFree,
            CovKernel::ZTorus { .. } => ProcessKind::ZTorus,
            CovKernel::TAux { .. } => ProcessKind::TAux,
            CovKernel::FFbm14 => ProcessKind::FFbm14,
            CovKernel::Bm => ProcessKind::Bm,
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        match *self {
            CovKernel::HFree => cov_h(s, t),
            CovKernel::ZTorus { x, y, modes } => {
                cov_z(s, t, TorusPoint::new(x), TorusPoint::new(y), modes)
            }
            CovKernel::TAux { kappa } => cov_t(s, t, kappa),
            CovKernel::FFbm14 => cov_f(s, t),
            CovKernel::Bm => cov_bm(s, t),
        }
    }

    /// Exponent `a` with `K(rs, rt) = r^a K(s, t)`, when the kernel is self-similar.
    pub fn scaling_exponent(&self) -> Option<f64> {
        match self {
            CovKernel::HFree | CovKernel::TAux { .. } | CovKernel::FFbm14 => Some(0.5),
            CovKernel::Bm => Some(1.0),
            CovKernel::ZTorus { .. } => None,
        }
    }

    pub fn matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let n = points.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(points[i], points[j])?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }
}

/// Smallest eigenvalue of a symmetric matrix relative to its spectral norm.
pub fn relative_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Least-squares fit of `c_F (cov_H + cov_T(kappa)) = cov_F` on a grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionFit {
    pub kappa: f64,
    /// Multiplier of the covariance, `c_F`.
    pub cov_scale: f64,
    /// Path-level factor, `F = amplitude (H + T)`, so `amplitude^2 = c_F`.
    pub amplitude: f64,
    pub max_residual: f64,
    pub kappa_as_written: f64,
    pub amplitude_as_written: f64,
    /// Residual of the identity when the published constants are used.
    pub residual_as_written: f64,
}

/// Fit the decomposition constants on the uniform grid of `n` points in `(0, horizon]`.
pub fn fit_decomposition(horizon: f64, n: usize) -> Result<DecompositionFit> {
    if n < 2 || !(horizon > 0.0) {
        return Err(Error::Domain(
            "decomposition fit needs n >= 2 and horizon > 0".into(),
        ));
    }
    let pts: Vec<f64> = (1..=n).map(|i| horizon * i as f64 / n as f64).collect();
    // cov_F = a cov_H + b g with g = cov_T at kappa = 1; then c_F = a, kappa^2 = b / a.
    let (mut shh, mut shg, mut sgg, mut shf, mut sgf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut rows = Vec::with_capacity(n * n);
    for &s in &pts {
        for &t in &pts {
            let h = cov_h(s, t)?;
            let g = cov_t(s, t, 1.0)?;
            let f = cov_f(s, t)?;
            shh += h * h;
            shg += h * g;
            sgg += g * g;
            shf += h * f;
            sgf += g * f;
            rows.push((h, g, f, s, t));
        }
    }
    let det = shh * sgg - shg * shg;
    let a = (sgg * shf - shg * sgf) / det;
    let b = (shh * sgf - shg * shf) / det;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!(
            "decomposition fit produced non-positive constants a={a}, b={b}"
        )));
    }
    let kappa = (b / a).sqrt();
    let max_residual = rows
        .iter()
        .map(|&(h, g, f, _, _)| (a * h + b * g - f).abs())
        .fold(0.0, f64::max);
    let amp_w = amplitude_as_written();
    let mut residual_as_written = 0.0f64;
    for &(h, _, f, s, t) in &rows {
        let tw = cov_t(s, t, KAPPA_AS_WRITTEN)?;
        residual_as_written = residual_as_written.max(((h + tw) / (amp_w * amp_w) - f).abs());
    }
    Ok(DecompositionFit {
        kappa,
        cov_scale: a,
        amplitude: a.sqrt(),
        max_residual,
        kappa_as_written: KAPPA_AS_WRITTEN,
        amplitude_as_written: amp_w,
        residual_as_written,
    })
}

/// Probability that `N(mean, sd^2)` lands in `[lo, hi]`, accurate in the tails.
pub(crate) fn normal_mass(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let a = (lo - mean) / (sd * SQRT_2);
    let b = (hi - mean) / (sd * SQRT_2);
    if a >= 0.0 {
        0.5 * (erfc(a) - erfc(b))
    } else if b <= 0.0 {
        0.5 * (erfc(-b) - erfc(-a))
    } else {
        1.0 - 0.5 * (erfc(-a) + erfc(b))
    }
}

const IMAGE_RANGE: i64 = 12;

/// `Var(H(t,0) - Z(t,0))` when both fields are driven by the same noise on
/// the fundamental domain, written as a sum of nonnegative image terms.
pub fn hz_gap_variance(t: f64) -> Result<f64> {
    ensure_time("t", t)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    let integrand = |r: f64| {
        if r <= 0.0 {
            return 0.0;
        }
        let sd = r.sqrt();
        let mut inside = 0.0;
        for n in -IMAGE_RANGE..=IMAGE_RANGE {
            if n == 0 {
                continue;
            }
            for m in -IMAGE_RANGE..=IMAGE_RANGE {
                if m == 0 {
                    continue;
                }
                let pref = gaussian_kernel(2.0 * r, 2.0 * (n - m) as f64);
                if pref == 0.0 {
                    continue;
                }
                inside += pref * normal_mass(-1.0, 1.0, -((n + m) as f64), sd);
            }
        }
        let outside = erfc(1.0 / (2.0 * r).sqrt()) / (8.0 * PI * r).sqrt();
        inside + outside
    };
    integrate(integrand, 0.0, t, 1e-300, 1e-10)
}

/// `E[H(t,0) Z(t,0)]` under the same coupling.
pub fn hz_cross_covariance(t: f64) -> Result<f64> {
    ensure_time("t", t)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    // r = u^2 removes the r^{-1/2} singularity at the origin.
    let integrand = |u: f64| {
        let r = u * u;
        if r == 0.0 {
            return 2.0 * u * 0.0;
        }
        let sd = r.sqrt();
        let mut sum = 0.0;
        for n in -IMAGE_RANGE..=IMAGE_RANGE {
            let pref = gaussian_kernel(2.0 * r, 2.0 * n as f64);
            sum += pref * normal_mass(-1.0, 1.0, -(n as f64), sd);
        }
        2.0 * u * sum
    };
    integrate(integrand, 0.0, t.sqrt(), 1e-14, 1e-12)
}

/// `Var Z(t,0) = int_0^t p_{2r}(0,0) dr`, exact up to quadrature error.
pub fn var_z_exact(t: f64) -> Result<f64> {
    ensure_time("t", t)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    let origin = TorusPoint::new(0.0);
    let integrand = |u: f64| {
        let r = u * u;
        if r == 0.0 {
            return 2.0 / (8.0 * PI).sqrt();
        }
        2.0 * u * heat_kernel_torus(2.0 * r, origin, origin, 1e-15).unwrap_or(f64::NAN)
    };
    integrate(integrand, 0.0, t.sqrt(), 1e-14, 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn torus_point_wraps() {
        assert_eq!(TorusPoint::new(1.0).value(), -1.0);
        assert!((TorusPoint::new(2.5).value() - 0.5).abs() < 1e-15);
        assert!((torus_distance(-0.9, 0.9) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn heat_kernel_reference_value() {
        let o = TorusPoint::new(0.0);
        let v = heat_kernel_torus(0.1, o, o, 1e-12).unwrap();
        let oracle = gaussian_kernel(0.1, 0.0) + 2.0 * gaussian_kernel(0.1, 2.0);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.8922).abs() < 1e-4);
        let far = heat_kernel_torus(50.0, o, TorusPoint::new(0.7), 1e-12).unwrap();
        assert!((far - 0.5).abs() < 1e-12);
        assert!(heat_kernel_torus(0.0, o, o, 1e-9).is_err());
        assert!(heat_kernel_torus(0.1, o, o, 1e-3).is_err());
    }

    #[test]
    fn heat_kernel_has_unit_mass() {
        for r in [0.01, 0.1, 1.0] {
            let x = TorusPoint::new(0.3);
            let mass = integrate(
                |y| heat_kernel_torus(r, x, TorusPoint::new(y), 1e-14).unwrap(),
                -1.0,
                1.0,
                1e-13,
                1e-13,
            )
            .unwrap();
            assert!((mass - 1.0).abs() < 1e-8, "r={r}: {mass}");
        }
    }

    #[test]
    fn heat_kernel_regimes_agree_at_switch() {
        let (x, y) = (TorusPoint::new(0.1), TorusPoint::new(-0.6));
        let images: f64 = (-6..=6)
            .map(|n| gaussian_kernel(0.5, 0.7 + 2.0 * n as f64))
            .sum();
        let series = heat_kernel_torus(0.5000001, x, y, 1e-14).unwrap();
        assert!((images - series).abs() < 1e-6);
    }

    #[test]
    fn cov_h_against_quadrature() {
        // Wiener isometry: int_0^s G_{s+t-2r}(0) dr.
        for &(s, t) in &[(1.0, 1.0), (0.25, 1.0), (0.3, 0.7)] {
            let lo: f64 = f64::min(s, t);
            let q = integrate(
                |u: f64| 2.0 * u * gaussian_kernel(s + t - 2.0 * (lo - u * u), 0.0),
                0.0,
                lo.sqrt(),
                1e-14,
                1e-13,
            )
            .unwrap();
            assert!(rel(cov_h(s, t).unwrap(), q) < 1e-10, "({s},{t})");
        }
        assert!((cov_h(1.0, 1.0).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert_eq!(cov_h(0.7, 0.0).unwrap(), 0.0);
        assert!((cov_h(4.0, 4.0).unwrap() - 2.0 / (2.0 * PI).sqrt()).abs() < 1e-14);
        assert!((cov_h(1.0, 0.25).unwrap() - 0.071_09).abs() < 1e-5);
        assert!(cov_h(-1.0, 1.0).is_err());
    }

    #[test]
    fn cov_t_against_spectral_quadrature() {
        // Spectral form: kappa^2 * 2 int_0^inf (1-e^{-s z^2/2})(1-e^{-t z^2/2}) z^{-2} dz.
        let spectral = |s: f64, t: f64, kappa: f64| {
            let g = |z: f64| -(-s * z * z / 2.0).exp_m1() * -(-t * z * z / 2.0).exp_m1();
            let head = integrate(
                |z| {
                    if z == 0.0 {
                        s * t * z * z / 4.0
                    } else {
                        g(z) / (z * z)
                    }
                },
                0.0,
                1.0,
                1e-15,
                1e-13,
            )
            .unwrap();
            let tail = integrate(
                |w| if w == 0.0 { 1.0 } else { g(1.0 / w) },
                0.0,
                1.0,
                1e-15,
                1e-13,
            )
            .unwrap();
            2.0 * kappa * kappa * (head + tail)
        };
        for &(s, t) in &[(1.0, 1.0), (0.2, 0.9), (3.0, 0.01)] {
            for kappa in [KAPPA_AS_WRITTEN, kappa_consistent()] {
                let closed = cov_t(s, t, kappa).unwrap();
                assert!((closed - spectral(s, t, kappa)).abs() < 1e-10, "({s},{t})");
            }
        }
        let written = cov_t(1.0, 1.0, KAPPA_AS_WRITTEN).unwrap();
        assert!((written - (2.0 - SQRT_2) / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((written - 0.233_694).abs() < 1e-6);
        let consistent = cov_t(1.0, 1.0, kappa_consistent()).unwrap();
        assert!((consistent - (2.0 - SQRT_2) / (2.0 * PI.sqrt())).abs() < 1e-15);
        assert!((consistent - 0.165_247).abs() < 1e-6);
        assert_eq!(cov_t(0.0, 2.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn cov_f_values() {
        assert_eq!(cov_f(1.0, 1.0).unwrap(), 1.0);
        assert!((cov_f(4.0, 1.0).unwrap() - 0.633_974_596).abs() < 1e-9);
    }

    #[test]
    fn cov_z_properties() {
        let o = TorusPoint::new(0.0);
        assert_eq!(cov_z(0.3, 0.0, o, o, 64).unwrap(), 0.0);
        let a = cov_z(0.02, 0.03, TorusPoint::new(0.4), TorusPoint::new(0.4), 512).unwrap();
        let b = cov_z(
            0.02,
            0.03,
            TorusPoint::new(-0.8),
            TorusPoint::new(-0.8),
            512,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-15);
        // Series against the image-sum integral of the torus kernel.
        for t in [0.01, 0.1] {
            let series = cov_z(t, t, o, o, DEFAULT_MODES).unwrap();
            let exact = var_z_exact(t).unwrap();
            assert!(
                (series - exact).abs() <= cov_z_tail_bound(DEFAULT_MODES),
                "t={t}"
            );
            assert!((series - cov_h(t, t).unwrap()).abs() <= 5.0 * t);
        }
    }

    #[test]
    fn canonical_distance_values() {
        let d = canonical_distance_t(0.0, 1.0, KAPPA_AS_WRITTEN).unwrap();
        assert!((d - 0.483_420_1).abs() < 1e-7);
        let naive = |s: f64, t: f64| {
            let k = KAPPA_AS_WRITTEN;
            (cov_t(s, s, k).unwrap() - 2.0 * cov_t(s, t, k).unwrap() + cov_t(t, t, k).unwrap())
                .sqrt()
        };
        assert!(
            rel(
                canonical_distance_t(0.3, 0.8, KAPPA_AS_WRITTEN).unwrap(),
                naive(0.3, 0.8)
            ) < 1e-12
        );
        assert_eq!(canonical_distance_t(0.5, 0.5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn decomposition_constants() {
        let fit = fit_decomposition(1.0, 64).unwrap();
        assert!(fit.max_residual < 1e-9, "{}", fit.max_residual);
        assert!(rel(fit.kappa, kappa_consistent()) < 1e-9);
        assert!(rel(fit.cov_scale, PI.sqrt()) < 1e-9);
        assert!(rel(fit.amplitude, PI.powf(0.25)) < 1e-9);
        assert!(fit.residual_as_written > 1e-2);
    }

    #[test]
    fn hz_gap_routes_agree() {
        for t in [0.1, 0.5, 1.0] {
            let direct = hz_gap_variance(t).unwrap();
            let via = cov_h(t, t).unwrap() - 2.0 * hz_cross_covariance(t).unwrap()
                + var_z_exact(t).unwrap();
            assert!((direct - via).abs() < 1e-9, "t={t}: {direct} vs {via}");
            assert!(direct <= 5.0 * t);
        }
        assert_eq!(hz_gap_variance(0.0).unwrap(), 0.0);
    }

    #[test]
    fn kernels_are_psd_on_random_grids() {
        let kernels = [
            CovKernel::HFree,
            CovKernel::TAux {
                kappa: kappa_consistent(),
            },
            CovKernel::FFbm14,
            CovKernel::Bm,
            CovKernel::ZTorus {
                x: 0.0,
                y: 0.0,
                modes: 256,
            },
        ];
        let pts: Vec<f64> = (0..96)
            .map(|i| ((i * 37) % 96) as f64 / 96.0 + 0.001)
            .collect();
        for k in &kernels {
            let m = k.matrix(&pts).unwrap();
            assert!(relative_min_eigenvalue(&m) >= -1e-10, "{k:?}");
            assert!((m.clone() - m.transpose()).amax() == 0.0);
        }
    }

    proptest! {
        #[test]
        fn prop_kernels_symmetric(s in 0.0f64..3.0, t in 0.0f64..3.0) {
            prop_assert_eq!(cov_h(s, t).unwrap(), cov_h(t, s).unwrap());
            prop_assert_eq!(cov_f(s, t).unwrap(), cov_f(t, s).unwrap());
            prop_assert_eq!(cov_t(s, t, 0.3).unwrap(), cov_t(t, s, 0.3).unwrap());
            let d1 = canonical_distance_t(s, t, 0.3).unwrap();
            let d2 = canonical_distance_t(t, s, 0.3).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-15 * d1.max(1.0));
        }

        #[test]
        fn prop_h_scaling(s in 0.0f64..2.0, t in 0.0f64..2.0, rho in 0.01f64..100.0) {
            let lhs = cov_h(rho * s, rho * t).unwrap();
            let rhs = rho.sqrt() * cov_h(s, t).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-3));
        }

        #[test]
        fn prop_f_increment_variance(s in 0.0f64..5.0, t in 0.0f64..5.0) {
            let v = cov_f(t, t).unwrap() - 2.0 * cov_f(s, t).unwrap() + cov_f(s, s).unwrap();
            prop_assert!((v - (t - s).abs().sqrt()).abs() < 1e-12);
        }

        #[test]
        fn prop_torus_distance(x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let d = torus_distance(x, y);
            prop_assert!(d >= 0.0 && d <= 1.0 + 1e-12);
            prop_assert!((d - torus_distance(y, x)).abs() < 1e-12);
        }

        #[test]
        fn prop_parabolic_quasi_triangle(
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, t3 in 0.0f64..1.0,
            x1 in -1.0f64..1.0, x2 in -1.0f64..1.0, x3 in -1.0f64..1.0,
        ) {
            let d13 = parabolic_metric(t1, x1, t3, x3);
            let bound = 2f64.powf(0.75) * (parabolic_metric(t1, x1, t2, x2) + parabolic_metric(t2, x2, t3, x3));
            prop_assert!(d13 <= bound + 1e-12);
            prop_assert_eq!(parabolic_metric(t1, x1, t2, x2), parabolic_metric(t2, x2, t1, x1));
        }

        #[test]
        fn prop_heat_kernel_dominates_nearest_image(r in 0.001f64..2.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let (px, py) = (TorusPoint::new(x), TorusPoint::new(y));
            let v = heat_kernel_torus(r, px, py, 1e-12).unwrap();
            prop_assert!(v + 1e-12 >= gaussian_kernel(r, px.distance(py)));
        }
    }
}
