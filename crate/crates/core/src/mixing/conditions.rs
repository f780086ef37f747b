//! Grid discretizations of the one-dimensional weighted Poincaré
//! inequality Var_λ(f) ≤ C ∫ s f'(s)² λ(ds) and its weak variant.

use super::{MixingKind, MixingMeasure};
use crate::error::{Error, Result};
use crate::quadrature::Rule;
use serde::Serialize;
use statrs::function::gamma::{gamma_lr, gamma_ur};
use std::fmt;
use std::sync::Arc;

const TINY_MASS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Con1Estimate {
    Finite { value: f64, grid_nodes: usize },
    Infinite { reason: String },
}

impl Con1Estimate {
    pub fn value(&self) -> f64 {
        match self {
            Con1Estimate::Finite { value, .. } => *value,
            Con1Estimate::Infinite { .. } => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Con1Estimate::Finite { .. })
    }
}

/// The rate function r ↦ α(r) of the weak inequality.
#[derive(Clone)]
pub enum WeakRate {
    Constant(f64),
    /// α(r) = coefficient · r^(−exponent)
    Power { coefficient: f64, exponent: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for WeakRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeakRate::Constant(c) => write!(f, "Constant({c})"),
            WeakRate::Power {
                coefficient,
                exponent,
            } => write!(f, "Power({coefficient} r^-{exponent})"),
            WeakRate::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl WeakRate {
    /// α(r); zero is accepted so that the α-free inequality can be probed.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!("r must be positive, got {r}")));
        }
        let a = match self {
            WeakRate::Constant(c) => *c,
            WeakRate::Power {
                coefficient,
                exponent,
            } => coefficient * r.powf(-exponent),
            WeakRate::Custom(f) => f(r),
        };
        if !a.is_finite() || a < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha({r}) = {a} must be finite and nonnegative"
            )));
        }
        Ok(a)
    }
}

/// λ discretized on an increasing grid.
///
/// The variance part is a quadratic form in the node values and the energy
/// part is Σ_j c_j (f_{j+1} − f_j)², the divided-difference version of
/// ∫ s f'² dλ with no boundary flux.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLaw {
    grid: Vec<f64>,
    mass: MassKind,
    edge: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum MassKind {
    /// Mass of the dual cell around each node.
    Cells(Vec<f64>),
    /// Atoms located inside grid cells: (cell, barycentric t, mass).
    Atoms(Vec<(usize, f64, f64)>),
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 3 nodes, got {}",
            grid.len()
        )));
    }
    if grid[0] < 0.0 || grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(
            "grid nodes must be finite and >= 0".into(),
        ));
    }
    if grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    Ok(())
}

fn gamma_mass(shape: f64, rate: f64, a: f64, b: f64) -> f64 {
    let mean = shape / rate;
    if a >= mean {
        let qb = if b.is_infinite() { 0.0 } else { gamma_ur(shape, rate * b) };
        gamma_ur(shape, rate * a) - qb
    } else {
        let pa = if a <= 0.0 { 0.0 } else { gamma_lr(shape, rate * a) };
        if b.is_infinite() {
            1.0 - pa
        } else {
            gamma_lr(shape, rate * b) - pa
        }
    }
}

impl GridLaw {
    pub fn new(law: &MixingMeasure, grid: &[f64]) -> Result<Self> {
        check_grid(grid)?;
        let n = grid.len();
        let mut edge = vec![0.0; n - 1];
        let mass = match law.kind() {
            MixingKind::PointMass { value } => {
                MassKind::Atoms(Self::place_atoms(grid, &[(*value, 1.0)], &mut edge))
            }
            MixingKind::FiniteDiscrete { atoms } => {
                MassKind::Atoms(Self::place_atoms(grid, atoms, &mut edge))
            }
            MixingKind::Gamma { shape, rate } => {
                let bounds = dual_bounds(grid);
                let masses = bounds
                    .windows(2)
                    .map(|b| gamma_mass(*shape, *rate, b[0], b[1]).max(0.0))
                    .collect();
                for (j, c) in edge.iter_mut().enumerate() {
                    // ∫ s ρ ds over [s_j, s_{j+1}] = (shape/rate) · λ_{shape+1}([s_j, s_{j+1}])
                    let moment_mass =
                        shape / rate * gamma_mass(shape + 1.0, *rate, grid[j], grid[j + 1]);
                    let h = grid[j + 1] - grid[j];
                    *c = moment_mass.max(0.0) / (h * h);
                }
                MassKind::Cells(masses)
            }
            MixingKind::Tabulated(t) => {
                let bounds = dual_bounds(grid);
                let masses = bounds
                    .windows(2)
                    .map(|b| {
                        let hi = if b[1].is_infinite() { t.s_max() } else { b[1] };
                        (t.cdf(hi) - t.cdf(b[0])).max(0.0)
                    })
                    .collect();
                for (j, c) in edge.iter_mut().enumerate() {
                    let moment_mass = Rule::on_edges(&[grid[j], grid[j + 1]], 8)
                        .integrate(|s| s * t.density(s));
                    let h = grid[j + 1] - grid[j];
                    *c = moment_mass / (h * h);
                }
                MassKind::Cells(masses)
            }
        };
        Ok(Self {
            grid: grid.to_vec(),
            mass,
            edge,
        })
    }

    fn place_atoms(grid: &[f64], atoms: &[(f64, f64)], edge: &mut [f64]) -> Vec<(usize, f64, f64)> {
        let last = grid.len() - 2;
        atoms
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(s, p)| {
                let j = grid.partition_point(|g| g <= s).saturating_sub(1).min(last);
                let h = grid[j + 1] - grid[j];
                let t = ((s - grid[j]) / h).clamp(0.0, 1.0);
                if *s >= grid[0] && *s <= grid[last + 1] {
                    edge[j] += p * s / (h * h);
                }
                (j, t, *p)
            })
            .collect()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        match &self.mass {
            MassKind::Cells(m) => {
                let mean: f64 = m.iter().zip(f).map(|(p, v)| p * v).sum();
                m.iter().zip(f).map(|(p, v)| p * (v - mean).powi(2)).sum()
            }
            MassKind::Atoms(atoms) => {
                let vals: Vec<(f64, f64)> = atoms
                    .iter()
                    .map(|(j, t, p)| (*p, (1.0 - t) * f[*j] + t * f[j + 1]))
                    .collect();
                let mean: f64 = vals.iter().map(|(p, v)| p * v).sum();
                vals.iter().map(|(p, v)| p * (v - mean).powi(2)).sum()
            }
        }
    }

    pub fn energy(&self, f: &[f64]) -> f64 {
        self.edge
            .iter()
            .enumerate()
            .map(|(j, c)| c * (f[j + 1] - f[j]).powi(2))
            .sum()
    }

    /// Reciprocal of the smallest nonzero generalized eigenvalue of
    /// (energy, variance) on the grid.
    fn best_constant(&self) -> Result<f64> {
        let MassKind::Cells(m) = &self.mass else {
            return Err(Error::InvalidArgument(
                "constant estimation needs a density on the grid".into(),
            ));
        };
        // Trim nodes carrying no mass at either end of the grid.
        let first = m.iter().position(|p| *p > TINY_MASS).unwrap_or(0);
        let last = m.iter().rposition(|p| *p > TINY_MASS).unwrap_or(0);
        if last < first + 2 {
            return Err(Error::InvalidArgument(
                "grid resolves fewer than 3 nodes with positive mass".into(),
            ));
        }
        let mass = &m[first..=last];
        if let Some(j) = mass.iter().position(|p| *p <= TINY_MASS) {
            return Err(Error::InvalidArgument(format!(
                "interior grid node {} carries no λ-mass",
                j + first
            )));
        }
        let edge = &self.edge[first..last];
        let n = mass.len();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n - 1];
        for j in 0..n {
            let left = if j > 0 { edge[j - 1] } else { 0.0 };
            let right = if j + 1 < n { edge[j] } else { 0.0 };
            diag[j] = (left + right) / mass[j];
        }
        for j in 0..n - 1 {
            off[j] = -edge[j] / (mass[j] * mass[j + 1]).sqrt();
        }
        let theta = tridiagonal_eigenvalue(&diag, &off, 1);
        if !(theta > 0.0) {
            return Ok(f64::INFINITY);
        }
        Ok(1.0 / theta)
    }
}

fn dual_bounds(grid: &[f64]) -> Vec<f64> {
    let mut b = Vec::with_capacity(grid.len() + 1);
    b.push(0.0);
    for p in grid.windows(2) {
        b.push(0.5 * (p[0] + p[1]));
    }
    b.push(f64::INFINITY);
    b
}

/// Number of eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for j in 1..diag.len() {
        let denom = if q == 0.0 { f64::EPSILON * (1.0 + x.abs()) } else { q };
        q = diag[j] - x - off[j - 1] * off[j - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// The k-th smallest (0-based) eigenvalue by Sturm bisection.
pub(crate) fn tridiagonal_eigenvalue(diag: &[f64], off: &[f64], k: usize) -> f64 {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..n {
        let r = (if j > 0 { off[j - 1].abs() } else { 0.0 })
            + (if j + 1 < n { off[j].abs() } else { 0.0 });
        lo = lo.min(diag[j] - r);
        hi = hi.max(diag[j] + r);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One evaluated (r, f) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Con2Case {
    pub r: f64,
    pub function_index: usize,
    pub variance: f64,
    pub energy: f64,
    pub alpha: f64,
    pub sup: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Con2Report {
    pub cases: Vec<Con2Case>,
    pub pass: bool,
}

impl MixingMeasure {
    /// A uniform grid on [0, s_max] with `nodes` points.
    pub fn default_grid(&self, nodes: usize) -> Vec<f64> {
        let top = if self.s_max() > 0.0 { self.s_max() } else { 1.0 };
        (0..nodes)
            .map(|j| top * j as f64 / (nodes - 1) as f64)
            .collect()
    }

    /// Smallest C valid for the divided-difference discretization on `grid`.
    pub fn estimate_con1_constant(&self, grid: &[f64]) -> Result<Con1Estimate> {
        match self.kind() {
            MixingKind::PointMass { .. } => Ok(Con1Estimate::Finite {
                value: 0.0,
                grid_nodes: 0,
            }),
            MixingKind::FiniteDiscrete { atoms } => {
                let mut support: Vec<f64> =
                    atoms.iter().filter(|(_, p)| *p > 0.0).map(|(s, _)| *s).collect();
                support.sort_by(f64::total_cmp);
                support.dedup();
                if support.len() <= 1 {
                    Ok(Con1Estimate::Finite {
                        value: 0.0,
                        grid_nodes: 0,
                    })
                } else {
                    Ok(Con1Estimate::Infinite {
                        reason: format!(
                            "λ has {} support points; a C¹ function that is locally constant \
                             near each atom with distinct values has positive variance and \
                             zero energy",
                            support.len()
                        ),
                    })
                }
            }
            MixingKind::Gamma { .. } | MixingKind::Tabulated(_) => {
                let law = GridLaw::new(self, grid)?;
                let c = law.best_constant()?;
                if c.is_finite() {
                    Ok(Con1Estimate::Finite {
                        value: c,
                        grid_nodes: grid.len(),
                    })
                } else {
                    Ok(Con1Estimate::Infinite {
                        reason: "no positive generalized eigenvalue on the grid".into(),
                    })
                }
            }
        }
    }

    /// Evaluates the weak inequality for every (r, f) pair; `battery` holds
    /// node values of each test function on `grid`.
    pub fn check_con2(
        &self,
        alpha: &WeakRate,
        r_grid: &[f64],
        grid: &[f64],
        battery: &[Vec<f64>],
    ) -> Result<Con2Report> {
        if battery.is_empty() {
            return Err(Error::InvalidArgument("empty function battery".into()));
        }
        if r_grid.is_empty() {
            return Err(Error::InvalidArgument("empty r grid".into()));
        }
        let law = GridLaw::new(self, grid)?;
        let mut cases = Vec::with_capacity(battery.len() * r_grid.len());
        for (idx, f) in battery.iter().enumerate() {
            if f.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    got: f.len(),
                });
            }
            let variance = law.variance(f);
            let energy = law.energy(f);
            let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for &r in r_grid {
                let a = alpha.eval(r)?;
                let rhs = a * energy + r * sup * sup;
                let margin = rhs - variance;
                let scale = variance.abs().max(rhs.abs());
                let pass = margin >= -1e-9 * scale;
                cases.push(Con2Case {
                    r,
                    function_index: idx,
                    variance,
                    energy,
                    alpha: a,
                    sup,
                    rhs,
                    margin,
                    pass,
                });
            }
        }
        let pass = cases.iter().all(|c| c.pass);
        Ok(Con2Report { cases, pass })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::TabulatedDensity;
    use statrs::function::gamma::ln_gamma;

    fn battery(grid: &[f64]) -> Vec<Vec<f64>> {
        vec![
            grid.iter().map(|s| s.min(5.0)).collect(),
            grid.iter().map(|s| (-s).exp()).collect(),
            grid.iter().map(|s| (s * 0.7).sin()).collect(),
            grid.iter().map(|s| (s - 1.0).tanh()).collect(),
        ]
    }

    #[test]
    fn sturm_bisection_matches_known_spectrum() {
        // path-graph Laplacian: eigenvalues 2 - 2 cos(k π / n)
        let n = 10;
        let mut diag = vec![2.0; n];
        diag[0] = 1.0;
        diag[n - 1] = 1.0;
        let off = vec![-1.0; n - 1];
        for k in 0..n {
            let expected = 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / n as f64).cos();
            let got = tridiagonal_eigenvalue(&diag, &off, k);
            assert!((got - expected).abs() < 1e-12, "k={k} {got} vs {expected}");
        }
    }

    #[test]
    fn point_mass_constant_is_zero() {
        let m = MixingMeasure::point_mass(1.0).unwrap();
        assert_eq!(m.estimate_con1_constant(&[0.0, 1.0, 2.0]).unwrap().value(), 0.0);
    }

    #[test]
    fn discrete_constant_is_infinite() {
        let m = MixingMeasure::finite_discrete(vec![(1.0, 0.5), (4.0, 0.5)]).unwrap();
        let est = m.estimate_con1_constant(&[0.0, 1.0, 2.0]).unwrap();
        assert!(!est.is_finite());
        assert_eq!(est.value(), f64::INFINITY);
        let single = MixingMeasure::finite_discrete(vec![(2.0, 1.0)]).unwrap();
        assert_eq!(single.estimate_con1_constant(&[0.0, 1.0, 2.0]).unwrap().value(), 0.0);
    }

    #[test]
    fn gamma_constants_are_reciprocal_rates() {
        let g11 = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let grid: Vec<f64> = (0..=1500).map(|j| 30.0 * j as f64 / 1500.0).collect();
        let c = g11.estimate_con1_constant(&grid).unwrap().value();
        assert!((c - 1.0).abs() < 0.02, "{c}");

        let g23 = MixingMeasure::gamma(2.0, 3.0).unwrap();
        let c = g23.estimate_con1_constant(&g23.default_grid(1000)).unwrap().value();
        assert!((c - 1.0 / 3.0).abs() < 0.02 / 3.0, "{c}");
    }

    #[test]
    fn grid_refinement_is_stable() {
        for (shape, rate) in [(1.0, 1.0), (2.0, 3.0), (3.0, 0.5)] {
            let g = MixingMeasure::gamma(shape, rate).unwrap();
            let coarse = g.estimate_con1_constant(&g.default_grid(400)).unwrap().value();
            let fine = g.estimate_con1_constant(&g.default_grid(799)).unwrap().value();
            assert!(((fine - coarse) / fine).abs() < 0.02, "{shape},{rate}: {coarse} {fine}");
        }
    }

    #[test]
    fn tabulated_constant_matches_gamma() {
        let density = |s: f64| (2.0 * 3.0f64.ln() - ln_gamma(2.0) + s.ln() - 3.0 * s).exp();
        let t = TabulatedDensity::from_fn(|s| if s > 0.0 { density(s) } else { 0.0 }, 15.0, 3000)
            .unwrap();
        let m = MixingMeasure::tabulated(t);
        let c = m.estimate_con1_constant(&m.default_grid(800)).unwrap().value();
        assert!((c - 1.0 / 3.0).abs() < 0.02 / 3.0, "{c}");
    }

    #[test]
    fn grid_validation() {
        let g = MixingMeasure::gamma(1.0, 1.0).unwrap();
        assert!(g.estimate_con1_constant(&[0.0, 1.0]).is_err());
        assert!(g.estimate_con1_constant(&[0.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn con2_point_mass_passes_with_zero_alpha() {
        let m = MixingMeasure::point_mass(1.0).unwrap();
        let grid: Vec<f64> = (0..50).map(|j| j as f64 * 0.1).collect();
        let report = m
            .check_con2(&WeakRate::Constant(0.0), &[1e-6, 0.1, 1.0], &grid, &battery(&grid))
            .unwrap();
        assert!(report.pass);
        assert!(report.cases.iter().all(|c| c.variance == 0.0));
    }

    #[test]
    fn con2_follows_from_con1() {
        let g = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let grid = g.default_grid(600);
        let c = g.estimate_con1_constant(&grid).unwrap().value();
        let report = g
            .check_con2(&WeakRate::Constant(c), &[0.1], &grid, &battery(&grid))
            .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn con2_fails_without_alpha() {
        let g = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let grid = g.default_grid(600);
        let clipped: Vec<f64> = grid.iter().map(|s| s.min(5.0)).collect();
        let report = g
            .check_con2(&WeakRate::Constant(0.0), &[1e-6], &grid, &[clipped])
            .unwrap();
        assert!(!report.pass);
        assert!(report.cases[0].margin < 0.0);
        assert!(report.cases[0].variance > 0.5);
    }

    #[test]
    fn con2_rejects_empty_inputs() {
        let g = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let grid = g.default_grid(10);
        assert!(g.check_con2(&WeakRate::Constant(1.0), &[0.1], &grid, &[]).is_err());
        assert!(g
            .check_con2(&WeakRate::Constant(1.0), &[], &grid, &battery(&grid))
            .is_err());
        assert!(WeakRate::Constant(-1.0).eval(0.1).is_err());
        assert_eq!(
            WeakRate::Power { coefficient: 2.0, exponent: 1.0 }.eval(0.5).unwrap(),
            4.0
        );
    }
}
