use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::PathEnsemble;
use crate::spde::log_plus;
use crate::stats::quantile_sorted;

/// `(t / log log_+(1/t))^(1/4)`.
pub fn psi(t: f64) -> f64 {
    (t / log_plus(1.0 / t).ln()).powf(0.25)
}

/// Normalized running suprema per path, with radii sorted in decreasing order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChungTable {
    pub epsilons: Vec<f64>,
    /// `ratios[p][k] = sup_[0, eps_k] |path_p| / psi(eps_k)`.
    pub ratios: Vec<Vec<f64>>,
    /// Running minimum of `ratios[p][..=k]`.
    pub running_inf: Vec<Vec<f64>>,
}

impl ChungTable {
    /// Quantile `q` of the running infimum across paths at each radius.
    pub fn running_inf_quantile(&self, q: f64) -> Vec<f64> {
        (0..self.epsilons.len())
            .map(|k| {
                let mut col: Vec<f64> = self.running_inf.iter().map(|r| r[k]).collect();
                col.sort_by(f64::total_cmp);
                quantile_sorted(&col, q)
            })
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.running_inf
            .iter()
            .all(|r| r.windows(2).all(|w| w[1] <= w[0]))
    }

    /// Columns: path, epsilon, ratio, running_inf.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,epsilon,ratio,running_inf\n");
        for (p, (ratio, inf)) in self.ratios.iter().zip(&self.running_inf).enumerate() {
            for (k, e) in self.epsilons.iter().enumerate() {
                s.push_str(&format!("{p},{e:e},{:e},{:e}\n", ratio[k], inf[k]));
            }
        }
        s
    }
}

pub fn chung_statistic(paths: &PathEnsemble, eps_grid: &[f64]) -> Result<ChungTable> {
    if eps_grid.len() < 8 {
        return Err(Error::Domain(format!(
            "need >= 8 radii, got {}",
            eps_grid.len()
        )));
    }
    let grid = &paths.grid;
    let mut eps = eps_grid.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    if eps
        .iter()
        .any(|&e| !(e > grid.start() && e <= grid.end() * (1.0 + 1e-12)))
    {
        return Err(Error::Domain(format!(
            "radii must lie in ({}, {}]",
            grid.start(),
            grid.end()
        )));
    }
    let points = grid.points();
    let ends: Vec<usize> = eps
        .iter()
        .map(|&e| points.partition_point(|&t| t <= e * (1.0 + 1e-12)))
        .collect();
    let mut ratios = Vec::with_capacity(paths.count());
    let mut running_inf = Vec::with_capacity(paths.count());
    for path in paths.paths() {
        // Prefix maxima so each radius costs O(1).
        let mut prefix = Vec::with_capacity(path.len());
        let mut m = 0.0f64;
        for v in path {
            m = m.max(v.abs());
            prefix.push(m);
        }
        let row: Vec<f64> = ends
            .iter()
            .zip(&eps)
            .map(|(&end, &e)| {
                if end == 0 {
                    0.0
                } else {
                    prefix[end - 1] / psi(e)
                }
            })
            .collect();
        let mut inf = row.clone();
        for k in 1..inf.len() {
            inf[k] = inf[k].min(inf[k - 1]);
        }
        ratios.push(row);
        running_inf.push(inf);
    }
    Ok(ChungTable {
        epsilons: eps,
        ratios,
        running_inf,
    })
}
