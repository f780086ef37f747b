//! Mixing measures λ on [0, ∞): moments, scale sampling, posterior scale
//! means and the one-dimensional weighted Poincaré conditions.

mod conditions;
mod tabulated;

pub use conditions::{Con1Estimate, Con2Case, Con2Report, GridLaw, WeakRate};
pub use tabulated::{TabulatedDensity, TailPolicy};

use crate::error::{Error, Result};
use crate::quadrature::Rule;
use rand::Rng;
use rand_distr::Distribution;
use serde::Serialize;
use statrs::function::gamma::{gamma_ur, ln_gamma};

/// λ-mass beyond the quadrature interval for continuous kinds.
pub const QUADRATURE_TAIL: f64 = 1e-12;
const GAMMA_PANELS: usize = 8;
const GAMMA_NODES_PER_PANEL: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingKind {
    PointMass { value: f64 },
    Gamma { shape: f64, rate: f64 },
    FiniteDiscrete { atoms: Vec<(f64, f64)> },
    Tabulated(TabulatedDensity),
}

/// One atom of a discrete representation of λ: a scale and its mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleNode {
    pub s: f64,
    pub mass: f64,
}

/// A probability law on the intensity scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMeasure {
    kind: MixingKind,
    /// Exact atoms for discrete kinds, quadrature nodes for continuous ones.
    support: Vec<ScaleNode>,
    s_max: f64,
}

impl MixingMeasure {
    pub fn point_mass(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidMixing(format!(
                "point mass location {value} must be finite and >= 0"
            )));
        }
        Ok(Self {
            kind: MixingKind::PointMass { value },
            support: vec![ScaleNode {
                s: value,
                mass: 1.0,
            }],
            s_max: value,
        })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidMixing(format!(
                "gamma parameters must be positive and finite (shape {shape}, rate {rate})"
            )));
        }
        // Resolve the second moment as well as the mass: cut where the
        // s²-weighted law has tail below QUADRATURE_TAIL / 10.
        let s_max = gamma_tail_point(shape + 2.0, rate, 0.1 * QUADRATURE_TAIL);
        let rule = Rule::composite(0.0, s_max, GAMMA_PANELS, GAMMA_NODES_PER_PANEL);
        let log_norm = shape * rate.ln() - ln_gamma(shape);
        let support = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(s, w)| ScaleNode {
                s: *s,
                mass: w * (log_norm + (shape - 1.0) * s.ln() - rate * s).exp(),
            })
            .collect();
        Ok(Self {
            kind: MixingKind::Gamma { shape, rate },
            support,
            s_max,
        })
    }

    pub fn finite_discrete(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMixing("finite discrete law has no atoms".into()));
        }
        for (j, (s, p)) in atoms.iter().enumerate() {
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::InvalidMixing(format!(
                    "atom[{j}] location {s} must be finite and >= 0"
                )));
            }
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::InvalidMixing(format!(
                    "atom[{j}] probability {p} must be finite and >= 0"
                )));
            }
        }
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixing(format!(
                "atom probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        let support = atoms
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(s, p)| ScaleNode { s: *s, mass: *p })
            .collect();
        let s_max = atoms.iter().fold(0.0f64, |m, (s, _)| m.max(*s));
        Ok(Self {
            kind: MixingKind::FiniteDiscrete { atoms },
            support,
            s_max,
        })
    }

    pub fn tabulated(table: TabulatedDensity) -> Self {
        let rule = table.quadrature();
        let support = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(s, w)| ScaleNode {
                s: *s,
                mass: w * table.density(*s),
            })
            .collect();
        let s_max = table.s_max();
        Self {
            kind: MixingKind::Tabulated(table),
            support,
            s_max,
        }
    }

    pub fn kind(&self) -> &MixingKind {
        &self.kind
    }

    /// Discrete representation used for every integral without a closed form.
    pub fn support(&self) -> &[ScaleNode] {
        &self.support
    }

    /// Right end of the support or quadrature interval.
    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn is_point_mass(&self) -> Option<f64> {
        match self.kind {
            MixingKind::PointMass { value } => Some(value),
            _ => None,
        }
    }

    /// ∫ g(s) λ(ds) over the discrete representation.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.support.iter().map(|n| n.mass * g(n.s)).sum()
    }

    /// log ∫ exp(log_g(s)) λ(ds), evaluated with a log-sum-exp over the support.
    pub fn log_integrate(&self, log_g: impl Fn(f64) -> f64) -> f64 {
        log_sum_exp(
            self.support
                .iter()
                .filter(|n| n.mass > 0.0)
                .map(|n| n.mass.ln() + log_g(n.s)),
        )
    }

    /// ∫ s^p λ(ds) for p ∈ {1, 2}.
    pub fn moment(&self, p: u32) -> Result<f64> {
        if p != 1 && p != 2 {
            return Err(Error::InvalidArgument(format!(
                "moment order must be 1 or 2, got {p}"
            )));
        }
        let pi = p as i32;
        Ok(match &self.kind {
            MixingKind::PointMass { value } => value.powi(pi),
            MixingKind::Gamma { shape, rate } => {
                if p == 1 {
                    shape / rate
                } else {
                    shape * (shape + 1.0) / (rate * rate)
                }
            }
            MixingKind::FiniteDiscrete { atoms } => {
                atoms.iter().map(|(s, q)| q * s.powi(pi)).sum()
            }
            MixingKind::Tabulated(t) => {
                let m = self.integrate(|s| s.powi(pi));
                if t.tail == TailPolicy::Truncated {
                    return Err(Error::DivergentMoment {
                        order: p,
                        reason: format!(
                            "table truncated at s_max = {}; the moment over [0, s_max] is {m}, \
                             which is only a lower bound",
                            t.s_max()
                        ),
                    });
                }
                m
            }
        })
    }

    /// First moment, rejected when it vanishes or is not resolved.
    pub fn positive_mean(&self) -> Result<f64> {
        let m = self.moment(1)?;
        if m <= 0.0 {
            return Err(Error::HypothesisUnmet(format!(
                "mean scale must be positive, got {m}"
            )));
        }
        Ok(m)
    }

    /// λ((s, ∞)).
    pub fn upper_tail(&self, s: f64) -> f64 {
        match &self.kind {
            MixingKind::PointMass { value } => {
                if *value > s {
                    1.0
                } else {
                    0.0
                }
            }
            MixingKind::Gamma { shape, rate } => {
                if s <= 0.0 {
                    1.0
                } else {
                    gamma_ur(*shape, rate * s)
                }
            }
            MixingKind::FiniteDiscrete { atoms } => {
                atoms.iter().filter(|(a, _)| *a > s).map(|(_, p)| p).sum()
            }
            MixingKind::Tabulated(t) => (1.0 - t.cdf(s)).max(0.0),
        }
    }

    pub fn sample_scale<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            MixingKind::PointMass { value } => *value,
            MixingKind::Gamma { shape, rate } => rand_distr::Gamma::new(*shape, 1.0 / rate)
                .expect("validated gamma parameters")
                .sample(rng),
            MixingKind::FiniteDiscrete { .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for node in &self.support {
                    acc += node.mass;
                    if u < acc {
                        return node.s;
                    }
                }
                self.support.last().unwrap().s
            }
            MixingKind::Tabulated(t) => sample_tabulated(t, rng),
        }
    }

    /// E[s | γ(X) = n] under π_{λ,μ} with μ(X) = `total_intensity`.
    pub fn posterior_scale_mean(&self, total_intensity: f64, n: u64) -> Result<f64> {
        if !(total_intensity.is_finite() && total_intensity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "total intensity must be positive, got {total_intensity}"
            )));
        }
        match &self.kind {
            MixingKind::PointMass { value } => Ok(*value),
            MixingKind::Gamma { shape, rate } => Ok((shape + n as f64) / (rate + total_intensity)),
            _ => {
                let nf = n as f64;
                let log_weight = |s: f64, power: f64| {
                    if s == 0.0 {
                        if power == 0.0 {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    } else {
                        power * s.ln() - s * total_intensity
                    }
                };
                let den = self.log_integrate(|s| log_weight(s, nf));
                if den == f64::NEG_INFINITY {
                    return Err(Error::NormalizerUnderflow {
                        count: n,
                        hint: format!(
                            "no scale in the support (s_max = {}) can produce {n} particles; \
                             enlarge s_max or lower the count cap",
                            self.s_max
                        ),
                    });
                }
                let num = self.log_integrate(|s| log_weight(s, nf + 1.0));
                Ok((num - den).exp())
            }
        }
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            MixingKind::PointMass { value } => format!("PointMass({value})"),
            MixingKind::Gamma { shape, rate } => format!("Gamma({shape}, {rate})"),
            MixingKind::FiniteDiscrete { atoms } => format!("FiniteDiscrete({atoms:?})"),
            MixingKind::Tabulated(t) => format!(
                "Tabulated({} nodes on [{}, {}])",
                t.grid().len(),
                t.s_min(),
                t.s_max()
            ),
        }
    }
}

pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Smallest s with Gamma upper tail below `tail`.
pub(crate) fn gamma_tail_point(shape: f64, rate: f64, tail: f64) -> f64 {
    let mut hi = (shape + 1.0) / rate;
    while gamma_ur(shape, rate * hi) > tail {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_ur(shape, rate * mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    hi
}

fn sample_tabulated<R: Rng + ?Sized>(t: &TabulatedDensity, rng: &mut R) -> f64 {
    let cumulative = t.cumulative();
    let total = *cumulative.last().unwrap();
    let u: f64 = rng.random::<f64>() * total;
    let j = cumulative
        .partition_point(|c| *c <= u)
        .saturating_sub(1)
        .min(t.interval_masses().len() - 1);
    let (a, b) = t.interval(j);
    let sup = t.interval_sup(j);
    if sup == 0.0 {
        return a;
    }
    loop {
        let s = a + (b - a) * rng.random::<f64>();
        if rng.random::<f64>() * sup <= t.density(s) {
            return s;
        }
    }
}
