//! Finite-difference solver for the nonlinear heat equation on the torus,
//! coupled pathwise to the linear field driven by the same noise.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fill_normal, RngStream};
use crate::stats::{quantile_sorted, weighted_line};

/// Diffusion coefficient `sigma(v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sigma {
    Constant {
        value: f64,
    },
    Cos,
    Sin,
    Affine {
        slope: f64,
        intercept: f64,
    },
    /// `sigma(clamp(v, -level, level))`.
    Truncated {
        inner: Box<Sigma>,
        level: f64,
    },
}

impl Sigma {
    pub fn eval(&self, v: f64) -> f64 {
        match self {
            Sigma::Constant { value } => *value,
            Sigma::Cos => v.cos(),
            Sigma::Sin => v.sin(),
            Sigma::Affine { slope, intercept } => slope * v + intercept,
            Sigma::Truncated { inner, level } => inner.eval(v.clamp(-level, *level)),
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            Sigma::Affine { slope, .. } => *slope == 0.0,
            _ => true,
        }
    }

    pub fn truncated(self, level: f64) -> Sigma {
        Sigma::Truncated {
            inner: Box::new(self),
            level,
        }
    }
}

/// Initial profile `u0(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    Constant {
        value: f64,
    },
    /// `amplitude * sin(pi * k * x)`.
    SinPi {
        amplitude: f64,
        k: u32,
    },
    /// `amplitude * cos(pi * k * x)`.
    CosPi {
        amplitude: f64,
        k: u32,
    },
}

impl InitialCondition {
    pub fn eval(&self, x: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            InitialCondition::Constant { value } => *value,
            InitialCondition::SinPi { amplitude, k } => amplitude * (PI * *k as f64 * x).sin(),
            InitialCondition::CosPi { amplitude, k } => amplitude * (PI * *k as f64 * x).cos(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    #[default]
    SemiImplicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdeConfig {
    /// Number of cells on the torus; `h = 2 / m`.
    pub m: usize,
    pub dt: f64,
    pub horizon: f64,
    pub sigma: Sigma,
    pub u0: InitialCondition,
    #[serde(default)]
    pub scheme: Scheme,
}

impl SpdeConfig {
    pub fn h(&self) -> f64 {
        2.0 / self.m as f64
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.m).map(|j| -1.0 + j as f64 * self.h()).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|i| i as f64 * self.dt).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 4 || self.m % 2 != 0 {
            return Err(Error::Domain(format!(
                "m must be even and >= 4, got {}",
                self.m
            )));
        }
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::Domain("dt and horizon must be > 0".into()));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) || steps.round() < 1.0 {
            return Err(Error::Domain(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.dt
            )));
        }
        if self.scheme == Scheme::Explicit {
            let limit = self.h() * self.h() / 2.0;
            if self.dt > limit * (1.0 + 1e-12) {
                return Err(Error::Cfl { dt: self.dt, limit });
            }
        }
        Ok(())
    }

    /// Same physics with a shorter horizon.
    pub fn with_horizon(&self, horizon: f64) -> SpdeConfig {
        SpdeConfig {
            horizon,
            ..self.clone()
        }
    }
}

/// Cell-averaged white noise, entries `N(0, dt/h)`, laid out `[step][cell]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseArray {
    pub steps: usize,
    pub m: usize,
    pub data: Vec<f64>,
    pub provenance: Option<RngStream>,
}

impl NoiseArray {
    pub fn sample(config: &SpdeConfig, rng: RngStream) -> Self {
        let (steps, m) = (config.steps(), config.m);
        let mut data = vec![0.0; steps * m];
        fill_normal(&mut rng.rng(), &mut data);
        let sd = (config.dt / config.h()).sqrt();
        data.iter_mut().for_each(|v| *v *= sd);
        Self {
            steps,
            m,
            data,
            provenance: Some(rng),
        }
    }

    /// Build from standard normals (used by latent-space samplers).
    pub fn from_standard(config: &SpdeConfig, z: &[f64]) -> Self {
        let sd = (config.dt / config.h()).sqrt();
        Self {
            steps: config.steps(),
            m: config.m,
            data: z.iter().map(|v| v * sd).collect(),
            provenance: None,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Aggregate blocks of `space` cells by `time` steps into the coarse noise
    /// of the same white noise.
    pub fn coarsen(&self, space: usize, time: usize) -> Result<Self> {
        if space == 0 || time == 0 || self.m % space != 0 || self.steps % time != 0 {
            return Err(Error::Domain(
                "coarsening factors must divide the noise shape".into(),
            ));
        }
        let (m, steps) = (self.m / space, self.steps / time);
        let mut data = vec![0.0; m * steps];
        for s in 0..self.steps {
            for j in 0..self.m {
                data[(s / time) * m + j / space] += self.data[s * self.m + j];
            }
        }
        let scale = 1.0 / space as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        Ok(Self {
            steps,
            m,
            data,
            provenance: self.provenance,
        })
    }

    fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.m..(step + 1) * self.m]
    }
}

/// Space-time values laid out `[time][space]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Field {
    pub config: SpdeConfig,
    pub noise_provenance: Option<RngStream>,
    pub values: Vec<f64>,
}

impl Field {
    pub fn at(&self, step: usize, j: usize) -> f64 {
        self.values[step * self.config.m + j]
    }

    pub fn slice(&self, step: usize) -> &[f64] {
        &self.values[step * self.config.m..(step + 1) * self.config.m]
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.config.m - 1
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Columns: step, t, x, value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,t,x,value")?;
        let xs = self.config.xs();
        for step in 0..=self.steps() {
            let t = step as f64 * self.config.dt;
            for (j, x) in xs.iter().enumerate() {
                writeln!(w, "{step},{t:e},{x:e},{:e}", self.at(step, j))?;
            }
        }
        Ok(())
    }
}

/// Linearization error `u - P u0 - sigma(u0) Z` on the solver grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorField {
    pub config: SpdeConfig,
    pub values: Vec<f64>,
}

impl ErrorField {
    pub fn slice(&self, step: usize) -> &[f64] {
        &self.values[step * self.config.m..(step + 1) * self.config.m]
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Constant-coefficient periodic tridiagonal solve for `(I - dt L) x = b`.
#[derive(Clone, Debug)]
struct CyclicSolver {
    off: f64,
    cprime: Vec<f64>,
    denom: Vec<f64>,
    gamma: f64,
    z: Vec<f64>,
    z_factor: f64,
}

impl CyclicSolver {
    fn new(m: usize, r: f64) -> Self {
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let gamma = -diag;
        let mut d = vec![diag; m];
        d[0] = diag - gamma;
        d[m - 1] = diag - off * off / gamma;
        let mut cprime = vec![0.0; m];
        let mut denom = vec![0.0; m];
        denom[0] = d[0];
        cprime[0] = off / denom[0];
        for i in 1..m {
            denom[i] = d[i] - off * cprime[i - 1];
            cprime[i] = off / denom[i];
        }
        let mut s = Self {
            off,
            cprime,
            denom,
            gamma,
            z: vec![0.0; m],
            z_factor: 0.0,
        };
        let mut u = vec![0.0; m];
        u[0] = gamma;
        u[m - 1] = off;
        s.thomas(&mut u);
        s.z_factor = 1.0 + u[0] + off * u[m - 1] / gamma;
        s.z = u;
        s
    }

    fn thomas(&self, x: &mut [f64]) {
        let m = x.len();
        x[0] /= self.denom[0];
        for i in 1..m {
            x[i] = (x[i] - self.off * x[i - 1]) / self.denom[i];
        }
        for i in (0..m - 1).rev() {
            x[i] -= self.cprime[i] * x[i + 1];
        }
    }

    fn solve(&self, x: &mut [f64]) {
        let m = x.len();
        self.thomas(x);
        let fact = (x[0] + self.off * x[m - 1] / self.gamma) / self.z_factor;
        for (xi, zi) in x.iter_mut().zip(&self.z) {
            *xi -= fact * zi;
        }
    }
}

/// Time stepper shared by every solve with a given configuration.
#[derive(Clone, Debug)]
pub struct Stepper {
    m: usize,
    r: f64,
    scheme: Scheme,
    solver: Option<CyclicSolver>,
}

impl Stepper {
    pub fn new(config: &SpdeConfig) -> Result<Self> {
        config.validate()?;
        let r = config.dt / (config.h() * config.h());
        let solver =
            (config.scheme == Scheme::SemiImplicit).then(|| CyclicSolver::new(config.m, r));
        Ok(Self {
            m: config.m,
            r,
            scheme: config.scheme,
            solver,
        })
    }

    /// Apply the discrete heat step in place; `scratch` has length `m`.
    pub fn heat_step(&self, v: &mut [f64], scratch: &mut [f64]) {
        match (&self.scheme, &self.solver) {
            (Scheme::SemiImplicit, Some(s)) => s.solve(v),
            _ => {
                let m = self.m;
                scratch.copy_from_slice(v);
                for j in 0..m {
                    let left = scratch[(j + m - 1) % m];
                    let right = scratch[(j + 1) % m];
                    v[j] = scratch[j] + self.r * (left - 2.0 * scratch[j] + right);
                }
            }
        }
    }
}

fn check_noise(config: &SpdeConfig, noise: &NoiseArray) -> Result<()> {
    if noise.m != config.m
        || noise.steps != config.steps()
        || noise.data.len() != noise.m * noise.steps
    {
        return Err(Error::GridMismatch(format!(
            "noise shape {}x{} does not match {} steps x {} cells",
            noise.steps,
            noise.m,
            config.steps(),
            config.m
        )));
    }
    Ok(())
}

/// Run the recursion `u' = A(u + sigma(u) xi)` and hand each time slice to `visit`.
pub fn integrate_u<F: FnMut(usize, &[f64]) -> bool>(
    config: &SpdeConfig,
    stepper: &Stepper,
    noise: &NoiseArray,
    mut visit: F,
) -> Result<()> {
    check_noise(config, noise)?;
    let m = config.m;
    let xs = config.xs();
    let mut u: Vec<f64> = xs.iter().map(|&x| config.u0.eval(x)).collect();
    let mut scratch = vec![0.0; m];
    if !visit(0, &u) {
        return Ok(());
    }
    for step in 0..config.steps() {
        for (uj, xi) in u.iter_mut().zip(noise.row(step)) {
            *uj += config.sigma.eval(*uj) * xi;
        }
        stepper.heat_step(&mut u, &mut scratch);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: step + 1 });
        }
        if !visit(step + 1, &u) {
            break;
        }
    }
    Ok(())
}

pub fn solve_u(config: &SpdeConfig, noise: &NoiseArray) -> Result<Field> {
    let stepper = Stepper::new(config)?;
    let mut values = Vec::with_capacity((config.steps() + 1) * config.m);
    integrate_u(config, &stepper, noise, |_, u| {
        values.extend_from_slice(u);
        true
    })?;
    Ok(Field {
        config: config.clone(),
        noise_provenance: noise.provenance,
        values,
    })
}

fn linear_config(config: &SpdeConfig) -> SpdeConfig {
    SpdeConfig {
        sigma: Sigma::Constant { value: 1.0 },
        u0: InitialCondition::Constant { value: 0.0 },
        ..config.clone()
    }
}

/// The linear field with `sigma = 1`, `u0 = 0` under the same noise and scheme.
pub fn solve_z_coupled(config: &SpdeConfig, noise: &NoiseArray) -> Result<Field> {
    let mut z = solve_u(&linear_config(config), noise)?;
    z.config = config.clone();
    Ok(z)
}

/// `A^n u0` for the discrete heat step `A`.
pub fn heat_semigroup(config: &SpdeConfig) -> Result<Field> {
    let quiet = NoiseArray {
        steps: config.steps(),
        m: config.m,
        data: vec![0.0; config.steps() * config.m],
        provenance: None,
    };
    let cfg = SpdeConfig {
        sigma: Sigma::Constant { value: 0.0 },
        ..config.clone()
    };
    let mut f = solve_u(&cfg, &quiet)?;
    f.config = config.clone();
    Ok(f)
}

pub fn linearization_error(u: &Field, z: &Field, config: &SpdeConfig) -> Result<ErrorField> {
    if u.noise_provenance != z.noise_provenance {
        return Err(Error::Provenance(
            "u and Z were driven by different noise".into(),
        ));
    }
    if u.values.len() != z.values.len() || u.config.m != config.m || z.config.m != config.m {
        return Err(Error::GridMismatch(
            "u and Z live on different grids".into(),
        ));
    }
    let heat = heat_semigroup(config)?;
    let m = config.m;
    let frozen: Vec<f64> = config
        .xs()
        .iter()
        .map(|&x| config.sigma.eval(config.u0.eval(x)))
        .collect();
    let values = u
        .values
        .iter()
        .zip(&z.values)
        .zip(&heat.values)
        .enumerate()
        .map(|(idx, ((uv, zv), hv))| uv - hv - frozen[idx % m] * zv)
        .collect();
    Ok(ErrorField {
        config: config.clone(),
        values,
    })
}

/// Linearization error of one replica without storing the fields.
fn error_sup_and_final(
    config: &SpdeConfig,
    stepper: &Stepper,
    noise: &NoiseArray,
) -> Result<(f64, Vec<f64>)> {
    let m = config.m;
    let xs = config.xs();
    let frozen: Vec<f64> = xs
        .iter()
        .map(|&x| config.sigma.eval(config.u0.eval(x)))
        .collect();
    let mut heat: Vec<f64> = xs.iter().map(|&x| config.u0.eval(x)).collect();
    let mut z = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut sup = 0.0f64;
    let mut last = vec![0.0; m];
    let steps = config.steps();
    integrate_u(config, stepper, noise, |step, u| {
        if step > 0 {
            let xi = noise.row(step - 1);
            for (zj, x) in z.iter_mut().zip(xi) {
                *zj += x;
            }
            stepper.heat_step(&mut z, &mut scratch);
            stepper.heat_step(&mut heat, &mut scratch);
        }
        for j in 0..m {
            let e = u[j] - heat[j] - frozen[j] * z[j];
            sup = sup.max(e.abs());
            if step == steps {
                last[j] = e;
            }
        }
        true
    })?;
    Ok((sup, last))
}

/// Per-time summary of the linearization error over independent replicas.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorRateRow {
    pub t: f64,
    pub replicas: usize,
    /// Quantiles (10, 25, 50, 75, 90 %) of `sup |E| / (sqrt(t) log+(1/t))`.
    pub sup_ratio_quantiles: [f64; 5],
    /// Same quantiles of `|E(t,x)| / sqrt(t)`, pooled over x.
    pub point_ratio_quantiles: [f64; 5],
    /// Slope of log-survival against threshold for the pointwise ratio.
    pub tail_slope: f64,
}

/// `log+(a) = log(max(a, e^e))`.
pub fn log_plus(a: f64) -> f64 {
    a.max(std::f64::consts::E.exp()).ln()
}

const QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

pub fn error_rate_study(
    config: &SpdeConfig,
    t_list: &[f64],
    replicas: usize,
    rng: RngStream,
) -> Result<Vec<ErrorRateRow>> {
    if replicas < 100 {
        return Err(Error::Domain(format!(
            "error_rate_study needs >= 100 replicas, got {replicas}"
        )));
    }
    let mut rows = Vec::new();
    for (ti, &t) in t_list.iter().enumerate() {
        if !(t > 0.0 && t <= 0.1) {
            return Err(Error::Domain(format!(
                "times must lie in (0, 0.1], got {t}"
            )));
        }
        let cfg = config.with_horizon(t);
        let stepper = Stepper::new(&cfg)?;
        let per: Vec<Result<(f64, Vec<f64>)>> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let noise = NoiseArray::sample(&cfg, rng.descend(&[ti as u64, r as u64]));
                error_sup_and_final(&cfg, &stepper, &noise)
            })
            .collect();
        let mut sup_ratio = Vec::with_capacity(replicas);
        let mut point = Vec::with_capacity(replicas * cfg.m);
        let norm = t.sqrt() * log_plus(1.0 / t);
        for res in per {
            let (sup, last) = res?;
            sup_ratio.push(sup / norm);
            point.extend(last.iter().map(|e| e.abs() / t.sqrt()));
        }
        sup_ratio.sort_by(f64::total_cmp);
        point.sort_by(f64::total_cmp);
        rows.push(ErrorRateRow {
            t,
            replicas,
            sup_ratio_quantiles: QUANTILES.map(|q| quantile_sorted(&sup_ratio, q)),
            point_ratio_quantiles: QUANTILES.map(|q| quantile_sorted(&point, q)),
            tail_slope: tail_slope(&point),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log P{X > a}` over thresholds at the upper quantiles.
fn tail_slope(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let levels = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for q in levels {
        let a = quantile_sorted(sorted, q);
        let above = sorted.len() - sorted.partition_point(|&v| v <= a);
        if above > 0 {
            xs.push(a);
            ys.push((above as f64 / n).ln());
        }
    }
    let w = vec![1.0; xs.len()];
    weighted_line(&xs, &ys, &w)
        .map(|(_, b, _)| b)
        .unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: Sigma, u0: InitialCondition, scheme: Scheme) -> SpdeConfig {
        let m = 32;
        let h = 2.0 / m as f64;
        SpdeConfig {
            m,
            dt: h * h / 4.0,
            horizon: 40.0 * h * h / 4.0,
            sigma,
            u0,
            scheme,
        }
    }

    #[test]
    fn cyclic_solver_inverts_the_operator() {
        let m = 10;
        let r = 0.7;
        let s = CyclicSolver::new(m, r);
        let b: Vec<f64> = (0..m).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut x = b.clone();
        s.solve(&mut x);
        for j in 0..m {
            let ax = (1.0 + 2.0 * r) * x[j] - r * (x[(j + m - 1) % m] + x[(j + 1) % m]);
            assert!((ax - b[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_sigma_is_the_heat_semigroup() {
        let c = cfg(
            Sigma::Constant { value: 0.0 },
            InitialCondition::SinPi {
                amplitude: 1.0,
                k: 1,
            },
            Scheme::SemiImplicit,
        );
        let noise = NoiseArray::sample(&c, RngStream::new(1, 1));
        let u = solve_u(&c, &noise).unwrap();
        let heat = heat_semigroup(&c).unwrap();
        assert_eq!(u.values, heat.values);
    }

    #[test]
    fn unit_sigma_from_zero_is_the_linear_field() {
        for scheme in [Scheme::Explicit, Scheme::SemiImplicit] {
            let c = cfg(
                Sigma::Constant { value: 1.0 },
                InitialCondition::Constant { value: 0.0 },
                scheme,
            );
            let noise = NoiseArray::sample(&c, RngStream::new(1, 2));
            let u = solve_u(&c, &noise).unwrap();
            let z = solve_z_coupled(&c, &noise).unwrap();
            assert_eq!(u.values, z.values);
            assert!(z.slice(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_field_is_linear_in_the_noise() {
        let c = cfg(
            Sigma::Cos,
            InitialCondition::Constant { value: 0.0 },
            Scheme::SemiImplicit,
        );
        let noise = NoiseArray::sample(&c, RngStream::new(2, 0));
        let z1 = solve_z_coupled(&c, &noise).unwrap();
        let z2 = solve_z_coupled(&c, &noise.scaled(2.0)).unwrap();
        for (a, b) in z1.values.iter().zip(&z2.values) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constant_sigma_gives_zero_error() {
        for scheme in [Scheme::Explicit, Scheme::SemiImplicit] {
            for c0 in [0.5, -2.0] {
                let c = cfg(
                    Sigma::Constant { value: c0 },
                    InitialCondition::Constant { value: 0.3 },
                    scheme,
                );
                let noise = NoiseArray::sample(&c, RngStream::new(3, 0));
                let u = solve_u(&c, &noise).unwrap();
                let z = solve_z_coupled(&c, &noise).unwrap();
                let e = linearization_error(&u, &z, &c).unwrap();
                assert!(e.sup_abs() < 1e-13, "{}", e.sup_abs());
                assert!(e.slice(0).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn streaming_error_matches_stored_error() {
        let c = cfg(
            Sigma::Cos,
            InitialCondition::SinPi {
                amplitude: 1.0,
                k: 1,
            },
            Scheme::SemiImplicit,
        );
        let noise = NoiseArray::sample(&c, RngStream::new(4, 0));
        let u = solve_u(&c, &noise).unwrap();
        let z = solve_z_coupled(&c, &noise).unwrap();
        let e = linearization_error(&u, &z, &c).unwrap();
        let (sup, last) = error_sup_and_final(&c, &Stepper::new(&c).unwrap(), &noise).unwrap();
        assert!((sup - e.sup_abs()).abs() < 1e-14);
        assert_eq!(last.as_slice(), e.slice(c.steps()));
    }

    #[test]
    fn provenance_mismatch_is_rejected() {
        let c = cfg(
            Sigma::Cos,
            InitialCondition::Constant { value: 0.0 },
            Scheme::SemiImplicit,
        );
        let u = solve_u(&c, &NoiseArray::sample(&c, RngStream::new(5, 0))).unwrap();
        let z = solve_z_coupled(&c, &NoiseArray::sample(&c, RngStream::new(5, 1))).unwrap();
        assert!(matches!(
            linearization_error(&u, &z, &c),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn explicit_scheme_enforces_cfl() {
        let mut c = cfg(
            Sigma::Cos,
            InitialCondition::Constant { value: 0.0 },
            Scheme::Explicit,
        );
        c.dt *= 3.0;
        c.horizon = c.dt * 10.0;
        assert!(matches!(Stepper::new(&c), Err(Error::Cfl { .. })));
        c.scheme = Scheme::SemiImplicit;
        assert!(Stepper::new(&c).is_ok());
    }

    #[test]
    fn blow_up_reports_step() {
        let c = SpdeConfig {
            m: 8,
            dt: 0.01,
            horizon: 1.0,
            sigma: Sigma::Affine {
                slope: 50.0,
                intercept: 0.0,
            },
            u0: InitialCondition::Constant { value: 1.0 },
            scheme: Scheme::SemiImplicit,
        };
        let noise = NoiseArray::sample(&c, RngStream::new(6, 0)).scaled(1e3);
        match solve_u(&c, &noise) {
            Err(Error::NonFinite { step }) => assert!(step >= 1),
            other => panic!("expected blow-up, got {:?}", other.map(|f| f.sup_abs())),
        }
    }

    #[test]
    fn truncation_clamps_the_argument() {
        let s = Sigma::Affine {
            slope: 1.0,
            intercept: 0.0,
        }
        .truncated(2.0);
        assert_eq!(s.eval(5.0), 2.0);
        assert_eq!(s.eval(-5.0), -2.0);
        assert_eq!(s.eval(1.5), 1.5);
        assert!(!Sigma::Affine {
            slope: 1.0,
            intercept: 0.0
        }
        .is_bounded());
    }

    #[test]
    fn coarsening_preserves_noise_variance() {
        let c = SpdeConfig {
            m: 64,
            dt: 1e-4,
            horizon: 0.04,
            sigma: Sigma::Cos,
            u0: InitialCondition::Constant { value: 0.0 },
            scheme: Scheme::SemiImplicit,
        };
        let fine = NoiseArray::sample(&c, RngStream::new(7, 0));
        let coarse = fine.coarsen(2, 4).unwrap();
        let var = coarse.data.iter().map(|v| v * v).sum::<f64>() / coarse.data.len() as f64;
        let target = 4.0 * c.dt / (2.0 * c.h());
        assert!((var / target - 1.0).abs() < 0.1, "{var} vs {target}");
    }
}
