//! Small statistics helpers shared by the estimators and the tests.

use statrs::distribution::{Beta, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("dof > 0")
        .inverse_cdf(p)
}

/// Exact binomial interval for `k` successes in `n` trials.
///
/// With `k = 0` the lower end is 0 and the upper end is the one-sided
/// bound at the full `alpha`.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::Domain(format!(
            "invalid binomial counts k={k}, n={n}"
        )));
    }
    let (kf, nf) = (k as f64, n as f64);
    if k == 0 {
        return Ok((0.0, 1.0 - alpha.powf(1.0 / nf)));
    }
    let lo = Beta::new(kf, nf - kf + 1.0)
        .expect("shape > 0")
        .inverse_cdf(alpha / 2.0);
    let hi = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf)
            .expect("shape > 0")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}

/// Empirical quantile with linear interpolation; `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Weighted least squares for `y = a + b x`. Returns `(a, b, cov)` where
/// `cov` is the 2x2 parameter covariance computed from the weights alone.
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64, [[f64; 2]; 2])> {
    if x.len() < 2 || x.len() != y.len() || x.len() != w.len() {
        return Err(Error::InsufficientData(format!(
            "weighted fit needs >= 2 matched points, got {}",
            x.len()
        )));
    }
    let (mut s, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        s += wi;
        sx += wi * xi;
        sxx += wi * xi * xi;
        sy += wi * yi;
        sxy += wi * xi * yi;
    }
    let det = s * sxx - sx * sx;
    if !(det.abs() > 1e-300) {
        return Err(Error::InsufficientData(
            "degenerate abscissae in weighted fit".into(),
        ));
    }
    let b = (s * sxy - sx * sy) / det;
    let a = (sy - b * sx) / s;
    let cov = [[sxx / det, -sx / det], [-sx / det, s / det]];
    Ok((a, b, cov))
}
