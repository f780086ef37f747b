//! Finite atomic base spaces, test functions and atom subsets.

use crate::error::{Error, Result};
use serde::Serialize;

/// A finite atomic space with positive intensity weights.
///
/// Atoms are identified by their position `0..len()`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseSpace {
    weights: Vec<f64>,
    total_mass: f64,
}

impl BaseSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSpace("weight list is empty".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w <= 0.0 {
                return Err(Error::InvalidSpace(format!(
                    "weight[{i}] = {w} must be positive and finite"
                )));
            }
        }
        let total_mass = weights.iter().sum();
        Ok(Self {
            weights,
            total_mass,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, atom: usize) -> f64 {
        self.weights[atom]
    }

    /// μ(X).
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// μ(h) = Σ w_i h_i.
    pub fn integrate(&self, h: &TestFunction) -> Result<f64> {
        self.check_dim(h)?;
        Ok(self.weights.iter().zip(&h.values).map(|(w, v)| w * v).sum())
    }

    /// μ(h²).
    pub fn integrate_square(&self, h: &TestFunction) -> Result<f64> {
        self.integrate(&h.map(|v| v * v))
    }

    pub fn indicator(&self, subset: &[usize]) -> Result<TestFunction> {
        let mut values = vec![0.0; self.len()];
        for &i in subset {
            if i >= self.len() {
                return Err(Error::UnknownAtom {
                    index: i,
                    len: self.len(),
                });
            }
            values[i] = 1.0;
        }
        Ok(TestFunction { values })
    }

    pub fn constant(&self, c: f64) -> TestFunction {
        TestFunction {
            values: vec![c; self.len()],
        }
    }

    /// The same space with one more atom of weight `w` appended.
    pub fn with_atom(&self, w: f64) -> Result<Self> {
        let mut weights = self.weights.clone();
        weights.push(w);
        Self::new(weights)
    }

    /// The space with atoms reordered: atom `j` of the result is atom `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: perm.len(),
            });
        }
        Self::new(perm.iter().map(|&i| self.weights[i]).collect())
    }

    pub fn check_dim(&self, h: &TestFunction) -> Result<()> {
        if h.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: h.len(),
            });
        }
        Ok(())
    }
}

/// A real function on the atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    values: Vec<f64>,
}

impl TestFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "test function value[{i}] is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, atom: usize) -> f64 {
        self.values[atom]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// γ(h) = Σ k_i h_i.
    pub fn pair(&self, counts: &[u32]) -> f64 {
        self.values
            .iter()
            .zip(counts)
            .map(|(v, k)| v * f64::from(*k))
            .sum()
    }

    pub fn linear_combination(a: f64, h: &Self, b: f64, g: &Self) -> Result<Self> {
        if h.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: h.len(),
                got: g.len(),
            });
        }
        Self::new(
            h.values
                .iter()
                .zip(&g.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }
}
