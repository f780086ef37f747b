//! Tabulated densities on a bounded interval.
//!
//! The table is interpolated by a piecewise-cubic Hermite interpolant with
//! second-order node slopes, clamped at zero. The quadrature puts Gauss–Legendre
//! panels on the tabulation intervals, so the interpolant is integrated
//! exactly wherever the clamp is inactive.

use crate::error::{Error, Result};
use crate::quadrature::Rule;
use serde::Serialize;
use std::path::Path;

/// Gauss–Legendre nodes per tabulation interval.
const NODES_PER_INTERVAL: usize = 4;

/// Whether the table describes the whole law or a truncation of a heavier one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    #[default]
    Compact,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabulatedDensity {
    grid: Vec<f64>,
    values: Vec<f64>,
    #[serde(skip)]
    slopes: Vec<f64>,
    #[serde(skip)]
    interval_mass: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
    pub tail: TailPolicy,
}

impl TabulatedDensity {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, tail: TailPolicy) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::InvalidMixing(format!(
                "tabulated density has {} nodes but {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.len() < 2 {
            return Err(Error::InvalidMixing(
                "tabulated density needs at least two nodes".into(),
            ));
        }
        if grid[0] < 0.0 || !grid[0].is_finite() {
            return Err(Error::InvalidMixing(format!(
                "tabulated grid must start at s >= 0, got {}",
                grid[0]
            )));
        }
        for (j, pair) in grid.windows(2).enumerate() {
            if !(pair[1] > pair[0]) || !pair[1].is_finite() {
                return Err(Error::InvalidMixing(format!(
                    "tabulated grid must be strictly increasing at index {}",
                    j + 1
                )));
            }
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidMixing(format!(
                "tabulated density value[{j}] = {} must be finite and nonnegative",
                values[j]
            )));
        }
        let slopes = hermite_slopes(&grid, &values);
        let mut table = Self {
            grid,
            values,
            slopes,
            interval_mass: Vec::new(),
            cumulative: Vec::new(),
            tail,
        };
        let rule = table.quadrature();
        let mut masses = vec![0.0; table.grid.len() - 1];
        for (k, (s, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            masses[k / NODES_PER_INTERVAL] += w * table.density(*s);
        }
        let mut cumulative = Vec::with_capacity(masses.len() + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for m in &masses {
            acc += m;
            cumulative.push(acc);
        }
        if (acc - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidMixing(format!(
                "tabulated density integrates to {acc}, expected 1 within 1e-8"
            )));
        }
        table.interval_mass = masses;
        table.cumulative = cumulative;
        Ok(table)
    }

    /// Samples `density` on `nodes` equal intervals of [0, s_max].
    pub fn from_fn(density: impl Fn(f64) -> f64, s_max: f64, intervals: usize) -> Result<Self> {
        let grid: Vec<f64> = (0..=intervals)
            .map(|j| s_max * j as f64 / intervals as f64)
            .collect();
        let values = grid.iter().map(|s| density(*s)).collect();
        Self::new(grid, values, TailPolicy::Compact)
    }

    /// Reads a two-column `s,density` CSV; a header row is optional.
    pub fn from_csv(path: &Path, tail: TailPolicy) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Io(e.to_string()))?;
            if record.len() != 2 {
                return Err(Error::InvalidMixing(format!(
                    "{}:{}: expected two columns (s, density), got {}",
                    path.display(),
                    line + 1,
                    record.len()
                )));
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) => {
                    grid.push(v[0]);
                    values.push(v[1]);
                }
                Err(_) if line == 0 => continue,
                Err(e) => {
                    return Err(Error::InvalidMixing(format!(
                        "{}:{}: {e}",
                        path.display(),
                        line + 1
                    )))
                }
            }
        }
        Self::new(grid, values, tail)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn s_min(&self) -> f64 {
        self.grid[0]
    }

    pub fn s_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Composite Gauss–Legendre rule with panels on the tabulation intervals.
    pub fn quadrature(&self) -> Rule {
        Rule::on_edges(&self.grid, NODES_PER_INTERVAL)
    }

    fn locate(&self, s: f64) -> Option<usize> {
        if s < self.grid[0] || s > self.s_max() {
            return None;
        }
        let j = self.grid.partition_point(|g| *g <= s);
        Some(j.saturating_sub(1).min(self.grid.len() - 2))
    }

    pub fn density(&self, s: f64) -> f64 {
        let Some(j) = self.locate(s) else {
            return 0.0;
        };
        let (x0, x1) = (self.grid[j], self.grid[j + 1]);
        let h = x1 - x0;
        let t = (s - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let v = h00 * self.values[j]
            + h10 * h * self.slopes[j]
            + h01 * self.values[j + 1]
            + h11 * h * self.slopes[j + 1];
        v.max(0.0)
    }

    /// λ([s_min, s]).
    pub fn cdf(&self, s: f64) -> f64 {
        if s <= self.grid[0] {
            return 0.0;
        }
        if s >= self.s_max() {
            return *self.cumulative.last().unwrap();
        }
        let j = self.locate(s).unwrap();
        let partial = Rule::on_edges(&[self.grid[j], s], NODES_PER_INTERVAL)
            .integrate(|x| self.density(x));
        self.cumulative[j] + partial
    }

    pub(crate) fn interval_masses(&self) -> &[f64] {
        &self.interval_mass
    }

    pub(crate) fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Upper bound of the interpolant on interval `j` (the Hermite
    /// derivative basis functions are bounded by 4/27).
    pub(crate) fn interval_sup(&self, j: usize) -> f64 {
        let h = self.grid[j + 1] - self.grid[j];
        self.values[j].max(self.values[j + 1])
            + 4.0 / 27.0 * h * (self.slopes[j].abs() + self.slopes[j + 1].abs())
    }

    pub(crate) fn interval(&self, j: usize) -> (f64, f64) {
        (self.grid[j], self.grid[j + 1])
    }
}

fn hermite_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let delta: Vec<f64> = (0..n - 1)
        .map(|j| (y[j + 1] - y[j]) / (x[j + 1] - x[j]))
        .collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut m = vec![0.0; n];
    for j in 1..n - 1 {
        let h0 = x[j] - x[j - 1];
        let h1 = x[j + 1] - x[j];
        m[j] = (h1 * delta[j - 1] + h0 * delta[j]) / (h0 + h1);
    }
    let (h0, h1) = (x[1] - x[0], x[2] - x[1]);
    m[0] = ((2.0 * h0 + h1) * delta[0] - h0 * delta[1]) / (h0 + h1);
    let (h0, h1) = (x[n - 1] - x[n - 2], x[n - 2] - x[n - 3]);
    m[n - 1] = ((2.0 * h0 + h1) * delta[n - 2] - h0 * delta[n - 3]) / (h0 + h1);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_density_is_exact() {
        let t = TabulatedDensity::new(vec![0.0, 0.5, 1.0], vec![1.0, 1.0, 1.0], TailPolicy::Compact)
            .unwrap();
        assert!((t.density(0.3) - 1.0).abs() < 1e-15);
        assert!((t.cdf(0.25) - 0.25).abs() < 1e-14);
        assert_eq!(t.density(1.5), 0.0);
    }

    #[test]
    fn rejects_unnormalized_and_bad_grids() {
        assert!(TabulatedDensity::new(vec![0.0, 1.0], vec![2.0, 2.0], TailPolicy::Compact).is_err());
        assert!(TabulatedDensity::new(vec![0.0, 0.0], vec![1.0, 1.0], TailPolicy::Compact).is_err());
        assert!(TabulatedDensity::new(vec![-1.0, 0.0], vec![1.0, 1.0], TailPolicy::Compact).is_err());
        assert!(TabulatedDensity::new(vec![0.0, 1.0], vec![1.0, -1.0], TailPolicy::Compact).is_err());
    }

    #[test]
    fn interpolant_is_clamped_at_zero() {
        // biweight bump on [0, 2], zero on (2, 3]
        let bump = |s: f64| {
            let u = s - 1.0;
            if u.abs() < 1.0 {
                15.0 / 16.0 * (1.0 - u * u).powi(2)
            } else {
                0.0
            }
        };
        let t = TabulatedDensity::from_fn(bump, 3.0, 3000).unwrap();
        for j in 0..=3000 {
            let s = 3.0 * j as f64 / 3000.0 + 1e-4;
            assert!(t.density(s) >= 0.0);
        }
        assert!((t.density(1.0) - 15.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "s,density\n0,1\n0.5,1\n1,1\n").unwrap();
        let t = TabulatedDensity::from_csv(&path, TailPolicy::Compact).unwrap();
        assert_eq!(t.grid(), &[0.0, 0.5, 1.0]);
        std::fs::write(&path, "0,1\n0.5,1,3\n").unwrap();
        assert!(TabulatedDensity::from_csv(&path, TailPolicy::Compact).is_err());
    }
}
