use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::ProcessKind;
use crate::rng::RngStream;

/// Streams that produced an ensemble: row `i` came from `base.child(i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub base: RngStream,
    pub count: u64,
}

impl Provenance {
    pub fn overlaps(&self, other: &Provenance) -> bool {
        self.base == other.base && self.count > 0 && other.count > 0
    }
}

/// A batch of paths on a shared time grid, stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub process: ProcessKind,
    pub provenance: Provenance,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub fn from_rows(
        grid: TimeGrid,
        process: ProcessKind,
        provenance: Provenance,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid.n() * provenance.count as usize {
            return Err(Error::GridMismatch(format!(
                "{} values do not fill {} paths of length {}",
                data.len(),
                provenance.count,
                grid.n()
            )));
        }
        Ok(Self {
            grid,
            process,
            provenance,
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.provenance.count as usize
    }

    pub fn len(&self) -> usize {
        self.grid.n()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.grid.n().max(1))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Empirical (uncentered) covariance and the standard error of each entry.
    pub fn covariance_with_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        second_moments(&self.data, self.grid.n(), self.count())
    }

    /// Columns: path_id, t_index, value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_id,t_index,value")?;
        for (p, path) in self.paths().enumerate() {
            for (i, v) in path.iter().enumerate() {
                writeln!(w, "{p},{i},{v:e}")?;
            }
        }
        Ok(())
    }

    /// Little-endian columnar dump: `u64 count, u64 n, n f64 times, count*n f64 values`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        w.write_all(&(self.grid.n() as u64).to_le_bytes())?;
        for t in self.grid.points() {
            w.write_all(&t.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Samples of a field at `xs.len()` spatial points on a time grid; the layout
/// is `[path][time][space]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceTimeEnsemble {
    pub grid: TimeGrid,
    pub xs: Vec<f64>,
    pub process: ProcessKind,
    pub provenance: Provenance,
    /// Bound on the truncation error of the covariance, when applicable.
    pub tail_bound: f64,
    data: Vec<f64>,
}

impl SpaceTimeEnsemble {
    pub(crate) fn new(
        grid: TimeGrid,
        xs: Vec<f64>,
        process: ProcessKind,
        provenance: Provenance,
        tail_bound: f64,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), grid.n() * xs.len() * provenance.count as usize);
        Self {
            grid,
            xs,
            process,
            provenance,
            tail_bound,
            data,
        }
    }

    pub fn count(&self) -> usize {
        self.provenance.count as usize
    }

    pub fn value(&self, path: usize, t_index: usize, x_index: usize) -> f64 {
        let (nt, nx) = (self.grid.n(), self.xs.len());
        self.data[(path * nt + t_index) * nx + x_index]
    }

    /// Time series of one path at one spatial point.
    pub fn series(&self, path: usize, x_index: usize) -> Vec<f64> {
        (0..self.grid.n())
            .map(|i| self.value(path, i, x_index))
            .collect()
    }

    /// Restrict to one spatial point, giving an ordinary path ensemble.
    pub fn at_point(&self, x_index: usize) -> PathEnsemble {
        let mut data = Vec::with_capacity(self.count() * self.grid.n());
        for p in 0..self.count() {
            data.extend(self.series(p, x_index));
        }
        PathEnsemble {
            grid: self.grid.clone(),
            process: self.process,
            provenance: self.provenance,
            data,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `E[X_i X_j]` over `count` rows of width `n`, with per-entry standard errors.
pub(crate) fn second_moments(data: &[f64], n: usize, count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for row in data.chunks(n) {
        for i in 0..n {
            let xi = row[i];
            let base = i * n;
            for j in 0..=i {
                let p = xi * row[j];
                sum[base + j] += p;
                sum_sq[base + j] += p * p;
            }
        }
    }
    let c = count as f64;
    let mut mean = vec![0.0; n * n];
    let mut se = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let m = sum[i * n + j] / c;
            let var = (sum_sq[i * n + j] / c - m * m).max(0.0) * c / (c - 1.0).max(1.0);
            let s = (var / c).sqrt();
            mean[i * n + j] = m;
            mean[j * n + i] = m;
            se[i * n + j] = s;
            se[j * n + i] = s;
        }
    }
    (mean, se)
}
