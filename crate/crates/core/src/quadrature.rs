//! Adaptive Gauss–Kronrod (7/15) integration.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrate `f` over `[a, b]` to absolute accuracy `abs_tol` or relative
/// accuracy `rel_tol`, whichever is looser.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!(
            "integration bounds must be finite: [{a}, {b}]"
        )));
    }
    let (sign, lo, hi) = if a < b { (1.0, a, b) } else { (-1.0, b, a) };
    let (v, e) = kronrod(&f, lo, hi);
    let mut intervals = vec![(lo, hi, v, e)];
    let mut total = v;
    let mut err = e;
    for _ in 0..4000 {
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let (idx, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (l, r, v0, e0) = intervals.swap_remove(idx);
        let m = 0.5 * (l + r);
        let (v1, e1) = kronrod(&f, l, m);
        let (v2, e2) = kronrod(&f, m, r);
        total += v1 + v2 - v0;
        err += e1 + e2 - e0;
        intervals.push((l, m, v1, e1));
        intervals.push((m, r, v2, e2));
    }
    // Re-sum to shed accumulated rounding from the running totals.
    let total: f64 = intervals.iter().map(|iv| iv.2).sum();
    let err: f64 = intervals.iter().map(|iv| iv.3).sum();
    if !total.is_finite() {
        return Err(Error::Domain(
            "integrand produced a non-finite value".into(),
        ));
    }
    if err > 10.0 * abs_tol.max(rel_tol * total.abs()) {
        return Err(Error::Domain(format!(
            "quadrature did not converge: estimate {total:e}, error {err:e}"
        )));
    }
    Ok(sign * total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_smooth_integrands() {
        let v = integrate(|x| x * x, 0.0, 3.0, 1e-14, 1e-14).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let v = integrate(f64::exp, 0.0, 1.0, 1e-14, 1e-14).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn endpoint_singularity() {
        let v = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-10).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let v = integrate(|x| x, 1.0, 0.0, 1e-14, 1e-14).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
    }
}
