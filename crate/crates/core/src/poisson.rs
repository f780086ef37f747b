//! Pure and mixed Poisson measures on count vectors over a finite atomic
//! space: sampling, log-space pmfs, Laplace transforms, change of scale,
//! and the truncated model that every exact sum runs on.

use crate::base_space::{BaseSpace, TestFunction};
use crate::error::{Error, Result};
use crate::mixing::{MixingKind, MixingMeasure};
use crate::par;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use statrs::function::gamma::{gamma_ur, ln_gamma};
use std::io::Write;
use std::sync::OnceLock;

/// Default certified bound on the probability outside the box.
pub const DEFAULT_TAIL_TARGET: f64 = 1e-12;
/// Largest per-atom cap the box search will try.
pub const MAX_CAP: u32 = 20_000;
const CHUNK: usize = 512;
/// Edge share of the largest summand above which growth at the edge is fatal.
const EDGE_FRACTION: f64 = 1e-6;

/// A configuration: occupation counts per atom plus the scale that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Configuration {
    pub counts: Vec<u32>,
    pub latent_scale: Option<f64>,
}

impl Configuration {
    pub fn new(counts: Vec<u32>) -> Self {
        Self {
            counts,
            latent_scale: None,
        }
    }

    pub fn empty(atoms: usize) -> Self {
        Self::new(vec![0; atoms])
    }

    pub fn with_scale(counts: Vec<u32>, s: f64) -> Self {
        Self {
            counts,
            latent_scale: Some(s),
        }
    }

    /// γ(X).
    pub fn total_count(&self) -> u64 {
        total(&self.counts)
    }

    /// γ(f).
    pub fn pair(&self, f: &TestFunction) -> f64 {
        f.pair(&self.counts)
    }

    /// γ + δ_{x_i}.
    pub fn added(&self, atom: usize) -> Self {
        let mut c = self.counts.clone();
        c[atom] += 1;
        Self::new(c)
    }

    /// γ − δ_{x_i}, absent when the atom is empty.
    pub fn removed(&self, atom: usize) -> Option<Self> {
        if self.counts[atom] == 0 {
            return None;
        }
        let mut c = self.counts.clone();
        c[atom] -= 1;
        Some(Self::new(c))
    }
}

pub(crate) fn total(counts: &[u32]) -> u64 {
    counts.iter().map(|k| u64::from(*k)).sum()
}

pub(crate) fn ln_factorial(k: u32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(4096);
        t.push(0.0);
        let mut acc = 0.0;
        for j in 1..4096u32 {
            acc += f64::from(j).ln();
            t.push(acc);
        }
        t
    });
    match table.get(k as usize) {
        Some(v) => *v,
        None => ln_gamma(f64::from(k) + 1.0),
    }
}

fn check_scale(s: f64) -> Result<()> {
    if !s.is_finite() || s < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "scale must be finite and >= 0, got {s}"
        )));
    }
    Ok(())
}

fn check_counts(space: &BaseSpace, k: &[u32]) -> Result<()> {
    if k.len() != space.len() {
        return Err(Error::DimensionMismatch {
            expected: space.len(),
            got: k.len(),
        });
    }
    Ok(())
}

/// log π_{sμ}(k), assuming validated inputs.
pub(crate) fn ln_pmf_pure_unchecked(s: f64, weights: &[f64], k: &[u32]) -> f64 {
    let mut acc = 0.0;
    for (w, ki) in weights.iter().zip(k) {
        let m = s * w;
        if *ki == 0 {
            acc -= m;
        } else if m == 0.0 {
            return f64::NEG_INFINITY;
        } else {
            acc += f64::from(*ki) * m.ln() - m - ln_factorial(*ki);
        }
    }
    acc
}

/// Π_i e^{−s w_i} (s w_i)^{k_i} / k_i!.
pub fn pmf_pure(s: f64, space: &BaseSpace, k: &[u32]) -> Result<f64> {
    check_scale(s)?;
    check_counts(space, k)?;
    Ok(ln_pmf_pure_unchecked(s, space.weights(), k).exp())
}

/// Negative-multinomial log-pmf of the Gamma(shape, rate) mixture.
fn ln_pmf_gamma(shape: f64, rate: f64, weights: &[f64], total_mass: f64, k: &[u32]) -> f64 {
    let n = total(k) as f64;
    let ln_denom = (rate + total_mass).ln();
    let mut acc = ln_gamma(shape + n) - ln_gamma(shape) + shape * (rate.ln() - ln_denom);
    for (w, ki) in weights.iter().zip(k) {
        if *ki > 0 {
            acc += f64::from(*ki) * (w.ln() - ln_denom) - ln_factorial(*ki);
        }
    }
    acc
}

pub(crate) fn ln_pmf_mixed_unchecked(mixing: &MixingMeasure, space: &BaseSpace, k: &[u32]) -> f64 {
    match mixing.kind() {
        MixingKind::PointMass { value } => ln_pmf_pure_unchecked(*value, space.weights(), k),
        MixingKind::Gamma { shape, rate } => {
            ln_pmf_gamma(*shape, *rate, space.weights(), space.total_mass(), k)
        }
        _ => mixing.log_integrate(|s| ln_pmf_pure_unchecked(s, space.weights(), k)),
    }
}

/// ∫ π_{sμ}(k) λ(ds).
pub fn pmf_mixed(mixing: &MixingMeasure, space: &BaseSpace, k: &[u32]) -> Result<f64> {
    check_counts(space, k)?;
    Ok(ln_pmf_mixed_unchecked(mixing, space, k).exp())
}

/// log ∫ s π_{sμ}(k) λ(ds), the scale-weighted pmf that enters the birth
/// integral of the Dirichlet form.
pub(crate) fn ln_birth_weight(mixing: &MixingMeasure, space: &BaseSpace, k: &[u32]) -> f64 {
    let weights = space.weights();
    match mixing.kind() {
        MixingKind::PointMass { value } => {
            if *value == 0.0 {
                f64::NEG_INFINITY
            } else {
                value.ln() + ln_pmf_pure_unchecked(*value, weights, k)
            }
        }
        MixingKind::Gamma { shape, rate } => {
            // ∫ s · Π (s w_i)^{k_i} e^{-s w_i}/k_i! · β^α s^{α-1} e^{-βs}/Γ(α) ds
            let n = total(k) as f64;
            let mut acc = shape * rate.ln() - ln_gamma(*shape) + ln_gamma(shape + n + 1.0)
                - (shape + n + 1.0) * (rate + space.total_mass()).ln();
            for (w, ki) in weights.iter().zip(k) {
                if *ki > 0 {
                    acc += f64::from(*ki) * w.ln() - ln_factorial(*ki);
                }
            }
            acc
        }
        _ => mixing.log_integrate(|s| {
            if s == 0.0 {
                f64::NEG_INFINITY
            } else {
                s.ln() + ln_pmf_pure_unchecked(s, weights, k)
            }
        }),
    }
}

/// Independent Poisson(s w_i) counts; s = 0 gives the empty configuration.
pub fn sample_pure<R: Rng + ?Sized>(s: f64, space: &BaseSpace, rng: &mut R) -> Result<Configuration> {
    check_scale(s)?;
    Ok(Configuration::with_scale(sample_counts(s, space, rng), s))
}

pub(crate) fn sample_counts<R: Rng + ?Sized>(s: f64, space: &BaseSpace, rng: &mut R) -> Vec<u32> {
    space
        .weights()
        .iter()
        .map(|w| {
            let m = s * w;
            if m > 0.0 {
                Poisson::new(m).expect("finite positive mean").sample(rng) as u32
            } else {
                0
            }
        })
        .collect()
}

/// Draws s ~ λ, then a pure configuration at scale s.
pub fn sample_mixed<R: Rng + ?Sized>(
    mixing: &MixingMeasure,
    space: &BaseSpace,
    rng: &mut R,
) -> Configuration {
    let s = mixing.sample_scale(rng);
    Configuration::with_scale(sample_counts(s, space, rng), s)
}

/// π_{sμ}(e^{⟨·,f⟩}) = exp[s Σ_i w_i (e^{f_i} − 1)].
pub fn laplace_pure(s: f64, space: &BaseSpace, f: &TestFunction) -> Result<f64> {
    check_scale(s)?;
    let c = laplace_exponent(space, f)?;
    Ok((s * c).exp())
}

fn laplace_exponent(space: &BaseSpace, f: &TestFunction) -> Result<f64> {
    space.check_dim(f)?;
    Ok(space
        .weights()
        .iter()
        .zip(f.values())
        .map(|(w, v)| w * v.exp_m1())
        .sum())
}

/// π_{λ,μ}(e^{⟨·,f⟩}); +∞ when the Gamma moment generating function diverges.
pub fn laplace_mixed(mixing: &MixingMeasure, space: &BaseSpace, f: &TestFunction) -> Result<f64> {
    let c = laplace_exponent(space, f)?;
    Ok(match mixing.kind() {
        MixingKind::PointMass { value } => (value * c).exp(),
        MixingKind::Gamma { shape, rate } => {
            if c >= *rate {
                f64::INFINITY
            } else {
                (shape * (rate.ln() - (rate - c).ln())).exp()
            }
        }
        _ => mixing.integrate(|s| (s * c).exp()),
    })
}

/// dπ_{tμ}/dπ_{sμ}(γ) = exp[γ(X) log(t/s) + (s − t) μ(X)] for s, t > 0.
pub fn rn_density(s: f64, t: f64, space: &BaseSpace, gamma: &Configuration) -> Result<f64> {
    check_counts(space, &gamma.counts)?;
    rn_density_counts(s, t, space.total_mass(), total(&gamma.counts))
}

pub(crate) fn rn_density_counts(s: f64, t: f64, total_mass: f64, n: u64) -> Result<f64> {
    if !(s > 0.0 && t > 0.0 && s.is_finite() && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "density ratio needs strictly positive finite scales, got s = {s}, t = {t}"
        )));
    }
    Ok((n as f64 * (t / s).ln() + (s - t) * total_mass).exp())
}

/// Closed-form first and second moments of F(γ) = γ(f) for f ≥ 0.
pub fn linear_moments(space: &BaseSpace, f: &TestFunction, mixing: &MixingMeasure) -> Result<(f64, f64)> {
    space.check_dim(f)?;
    if !f.is_nonnegative() {
        return Err(Error::InvalidArgument(
            "linear moments require a nonnegative test function".into(),
        ));
    }
    let mu_f = space.integrate(f)?;
    let mu_f2 = space.integrate_square(f)?;
    let m1 = mixing.moment(1)?;
    let m2 = mixing.moment(2)?;
    Ok((mu_f * m1, mu_f * mu_f * m2 + mu_f2 * m1))
}

/// Product box Π_i {0, …, caps[i]} with mixed-radix state indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountBox {
    caps: Vec<u32>,
    #[serde(skip)]
    strides: Vec<usize>,
    #[serde(skip)]
    len: usize,
}

impl CountBox {
    pub fn new(caps: Vec<u32>) -> Result<Self> {
        let mut strides = Vec::with_capacity(caps.len());
        let mut len: usize = 1;
        for c in &caps {
            strides.push(len);
            len = len
                .checked_mul(*c as usize + 1)
                .ok_or_else(|| Error::InvalidArgument("box has too many states".into()))?;
        }
        Ok(Self { caps, strides, len })
    }

    pub fn caps(&self) -> &[u32] {
        &self.caps
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> usize {
        self.caps.len()
    }

    pub fn contains(&self, k: &[u32]) -> bool {
        k.len() == self.caps.len() && k.iter().zip(&self.caps).all(|(a, c)| a <= c)
    }

    pub fn index(&self, k: &[u32]) -> usize {
        k.iter()
            .zip(&self.strides)
            .map(|(a, s)| *a as usize * s)
            .sum()
    }

    pub fn state(&self, mut idx: usize) -> Vec<u32> {
        let mut k = vec![0; self.caps.len()];
        for (i, c) in self.caps.iter().enumerate() {
            let r = *c as usize + 1;
            k[i] = (idx % r) as u32;
            idx /= r;
        }
        k
    }

    pub fn stride(&self, atom: usize) -> usize {
        self.strides[atom]
    }

    /// Distance to the upper faces: min_i (caps_i − k_i).
    pub fn depth(&self, k: &[u32]) -> u32 {
        k.iter()
            .zip(&self.caps)
            .map(|(a, c)| c - a)
            .min()
            .unwrap_or(0)
    }

    /// Visits states `start..end` in index order with their count vectors.
    pub fn for_each_in(&self, start: usize, end: usize, mut f: impl FnMut(usize, &[u32])) {
        if start >= end {
            return;
        }
        let mut k = self.state(start);
        for idx in start..end {
            f(idx, &k);
            for (i, c) in self.caps.iter().enumerate() {
                if k[i] < *c {
                    k[i] += 1;
                    break;
                }
                k[i] = 0;
            }
        }
    }
}

/// Per-atom Chernoff bound on P(k_i > cap) under the mixed law.
fn atom_tail_bound(mixing: &MixingMeasure, w: f64, cap: u32) -> f64 {
    let a = f64::from(cap) + 1.0;
    let ln_chernoff = |m: f64| {
        if m <= 0.0 {
            f64::NEG_INFINITY
        } else if m >= a {
            0.0
        } else {
            -m + a * (1.0 + m.ln() - a.ln())
        }
    };
    match mixing.kind() {
        MixingKind::Gamma { shape, rate } => {
            // Integral of the unrestricted Chernoff expression plus the λ-mass
            // of scales where the bound is vacuous.
            let ln_closed = a * (1.0 + w.ln() - a.ln()) + shape * rate.ln() + ln_gamma(a + shape)
                - ln_gamma(*shape)
                - (a + shape) * (rate + w).ln();
            (ln_closed.exp() + gamma_ur(*shape, rate * a / w)).min(1.0)
        }
        _ => mixing
            .support()
            .iter()
            .map(|n| n.mass * ln_chernoff(n.s * w).exp())
            .sum::<f64>()
            .min(1.0),
    }
}

/// How the truncation box is chosen.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationPolicy {
    /// Certified bound on the mass outside the box (union over atoms).
    pub tail_target: f64,
    /// Explicit per-atom caps; overrides the search when present.
    pub caps: Option<Vec<u32>>,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            tail_target: DEFAULT_TAIL_TARGET,
            caps: None,
        }
    }
}

impl TruncationPolicy {
    pub fn with_target(tail_target: f64) -> Self {
        Self {
            tail_target,
            caps: None,
        }
    }

    pub fn with_caps(caps: Vec<u32>) -> Self {
        Self {
            tail_target: DEFAULT_TAIL_TARGET,
            caps: Some(caps),
        }
    }
}

/// The mixed Poisson law restricted to a product box, with its pmf table and
/// a certified bound on the mass outside the box.
#[derive(Debug, Clone)]
pub struct TruncatedModel {
    space: BaseSpace,
    mixing: MixingMeasure,
    count_box: CountBox,
    pmf: Vec<f64>,
    tail_mass: f64,
    atom_tails: Vec<f64>,
}

impl TruncatedModel {
    pub fn build(space: BaseSpace, mixing: MixingMeasure, policy: &TruncationPolicy) -> Result<Self> {
        if !(policy.tail_target > 0.0 && policy.tail_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tail target must lie in (0, 1), got {}",
                policy.tail_target
            )));
        }
        let n = space.len();
        let caps = match &policy.caps {
            Some(c) => {
                if c.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: c.len(),
                    });
                }
                c.clone()
            }
            None => {
                let per_atom = policy.tail_target / n as f64;
                let mut caps = Vec::with_capacity(n);
                for &w in space.weights() {
                    let mut cap = 0u32;
                    while atom_tail_bound(&mixing, w, cap) > per_atom {
                        cap += 1;
                        if cap > MAX_CAP {
                            return Err(Error::BudgetOverflow(format!(
                                "no count cap up to {MAX_CAP} brings the tail of an atom with \
                                 weight {w} below {per_atom:e}"
                            )));
                        }
                    }
                    caps.push(cap);
                }
                caps
            }
        };
        let atom_tails: Vec<f64> = space
            .weights()
            .iter()
            .zip(&caps)
            .map(|(w, c)| atom_tail_bound(&mixing, *w, *c))
            .collect();
        let tail_mass = atom_tails.iter().sum::<f64>().min(1.0);
        let count_box = CountBox::new(caps)?;
        let chunks = count_box.len().div_ceil(CHUNK);
        let pmf: Vec<f64> = par::map_indexed(chunks, |c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(count_box.len());
            let mut out = Vec::with_capacity(end - start);
            count_box.for_each_in(start, end, |_, k| {
                out.push(ln_pmf_mixed_unchecked(&mixing, &space, k).exp())
            });
            out
        })
        .into_iter()
        .flatten()
        .collect();
        Ok(Self {
            space,
            mixing,
            count_box,
            pmf,
            tail_mass,
            atom_tails,
        })
    }

    /// A pure Poisson model at scale s.
    pub fn pure(space: BaseSpace, s: f64, policy: &TruncationPolicy) -> Result<Self> {
        Self::build(space, MixingMeasure::point_mass(s)?, policy)
    }

    pub fn space(&self) -> &BaseSpace {
        &self.space
    }

    pub fn mixing(&self) -> &MixingMeasure {
        &self.mixing
    }

    pub fn count_box(&self) -> &CountBox {
        &self.count_box
    }

    pub fn pmf_table(&self) -> &[f64] {
        &self.pmf
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn atom_tails(&self) -> &[f64] {
        &self.atom_tails
    }

    pub fn state_count(&self) -> usize {
        self.count_box.len()
    }

    pub fn box_mass(&self) -> f64 {
        par::pairwise_sum(&self.pmf)
    }

    /// ∫ s π_{sμ}(k) λ(ds).
    pub fn birth_weight(&self, k: &[u32]) -> f64 {
        ln_birth_weight(&self.mixing, &self.space, k).exp()
    }

    /// Σ_{k in box} g(k, π(k)), chunked in a fixed partition and summed pairwise.
    pub fn box_sum(&self, g: impl Fn(&[u32], f64) -> f64 + Sync + Send) -> f64 {
        let chunks = self.count_box.len().div_ceil(CHUNK);
        let partial = par::map_indexed(chunks, |c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(self.count_box.len());
            let mut acc = Vec::with_capacity(end - start);
            self.count_box
                .for_each_in(start, end, |idx, k| acc.push(g(k, self.pmf[idx])));
            par::pairwise_sum(&acc)
        });
        par::pairwise_sum(&partial)
    }

    /// Several box sums sharing one pass over the states.
    pub fn box_sums<const N: usize>(
        &self,
        g: impl Fn(&[u32], f64) -> [f64; N] + Sync + Send,
    ) -> [f64; N] {
        let chunks = self.count_box.len().div_ceil(CHUNK);
        let partial = par::map_indexed(chunks, |c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(self.count_box.len());
            let mut acc: [Vec<f64>; N] = std::array::from_fn(|_| Vec::with_capacity(end - start));
            self.count_box.for_each_in(start, end, |idx, k| {
                let v = g(k, self.pmf[idx]);
                for j in 0..N {
                    acc[j].push(v[j]);
                }
            });
            std::array::from_fn::<f64, N, _>(|j| par::pairwise_sum(&acc[j]))
        });
        std::array::from_fn(|j| {
            let col: Vec<f64> = partial.iter().map(|p| p[j]).collect();
            par::pairwise_sum(&col)
        })
    }

    /// Σ_{k in box} g(k) π_{λ,μ}(k).
    pub fn expect(&self, g: impl Fn(&[u32]) -> f64 + Sync + Send) -> f64 {
        self.box_sum(|k, p| if p == 0.0 { 0.0 } else { p * g(k) })
    }

    /// Envelope of a summand on the two outermost layers of the box.
    ///
    /// Returns `(outer, inner)` maxima of |summand|; used to bound what the
    /// box leaves out and to detect summands that do not decay at the edge.
    pub fn edge_envelope(&self, summand: impl Fn(&[u32], f64) -> f64 + Sync + Send) -> (f64, f64) {
        let chunks = self.count_box.len().div_ceil(CHUNK);
        let partial = par::map_indexed(chunks, |c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(self.count_box.len());
            let (mut outer, mut inner) = (0.0f64, 0.0f64);
            self.count_box.for_each_in(start, end, |idx, k| {
                match self.count_box.depth(k) {
                    0 => outer = outer.max(summand(k, self.pmf[idx]).abs()),
                    1 => inner = inner.max(summand(k, self.pmf[idx]).abs()),
                    _ => {}
                }
            });
            (outer, inner)
        });
        partial
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (c, d)| (a.max(c), b.max(d)))
    }

    fn box_max(&self, summand: impl Fn(&[u32], f64) -> f64 + Sync + Send) -> f64 {
        let chunks = self.count_box.len().div_ceil(CHUNK);
        par::map_indexed(chunks, |c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(self.count_box.len());
            let mut m = 0.0f64;
            self.count_box
                .for_each_in(start, end, |idx, k| m = m.max(summand(k, self.pmf[idx])));
            m
        })
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Truncation budget for Σ g·π: tail mass times the edge envelope of |g|,
    /// doubled. Fails when g·π grows toward the box edge while the edge still
    /// carries a non-negligible share of its largest value.
    pub fn truncation_budget(&self, g: impl Fn(&[u32]) -> f64 + Sync + Send) -> Result<f64> {
        let (outer, inner) = self.edge_envelope(|k, p| g(k).abs() * p);
        let (g_outer, _) = self.edge_envelope(|k, _| g(k).abs());
        let has_inner = self.count_box.caps().iter().all(|c| *c >= 1);
        let growing = has_inner && outer > inner && outer > 1e-300 && {
            let bulk = self.box_max(|k, p| g(k).abs() * p);
            outer > EDGE_FRACTION * bulk
        };
        if !g_outer.is_finite() || growing {
            return Err(Error::BudgetOverflow(format!(
                "summand does not decay at the box edge (edge layer {outer:e}, next layer {inner:e})"
            )));
        }
        Ok(2.0 * self.tail_mass * g_outer)
    }

    /// Writes `k_0,…,k_{n-1},probability` rows for every state in the box.
    pub fn write_pmf_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.space.len()).map(|i| format!("k_{i}")).collect();
        header.push("probability".into());
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        let mut err = None;
        self.count_box.for_each_in(0, self.count_box.len(), |idx, k| {
            if err.is_some() {
                return;
            }
            let mut row: Vec<String> = k.iter().map(|v| v.to_string()).collect();
            row.push(format!("{:e}", self.pmf[idx]));
            if let Err(e) = w.write_record(&row) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(Error::Io(e.to_string()));
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamFactory;
    use crate::stats::Accumulator;
    use proptest::prelude::*;

    fn space(w: &[f64]) -> BaseSpace {
        BaseSpace::new(w.to_vec()).unwrap()
    }

    /// Negative binomial pmf by the ratio recursion, without log-gamma.
    fn nb_oracle(shape: f64, rate: f64, w: f64, kmax: usize) -> Vec<f64> {
        let q = w / (rate + w);
        let mut p = vec![(rate / (rate + w)).powf(shape)];
        for k in 0..kmax {
            let next = p[k] * (shape + k as f64) / (k as f64 + 1.0) * q;
            p.push(next);
        }
        p
    }

    /// A battery of models small enough for exhaustive checks.
    fn battery() -> Vec<TruncatedModel> {
        let cases: Vec<(Vec<f64>, MixingMeasure)> = vec![
            (vec![1.0], MixingMeasure::point_mass(1.0).unwrap()),
            (vec![2.0, 3.0], MixingMeasure::point_mass(0.5).unwrap()),
            (vec![2.0], MixingMeasure::gamma(2.0, 1.0).unwrap()),
            (vec![0.5, 0.25], MixingMeasure::gamma(2.0, 3.0).unwrap()),
            (
                vec![1.0, 0.5],
                MixingMeasure::finite_discrete(vec![(0.0, 0.3), (1.0, 0.4), (3.0, 0.3)]).unwrap(),
            ),
        ];
        cases
            .into_iter()
            .map(|(w, m)| TruncatedModel::build(space(&w), m, &TruncationPolicy::default()).unwrap())
            .collect()
    }

    #[test]
    fn pure_pmf_examples() {
        let s1 = space(&[1.0]);
        assert!((pmf_pure(1.0, &s1, &[0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(pmf_pure(0.0, &s1, &[0]).unwrap(), 1.0);
        assert_eq!(pmf_pure(0.0, &s1, &[3]).unwrap(), 0.0);
        let s2 = space(&[0.5, 0.5]);
        assert!((pmf_pure(2.0, &s2, &[1, 1]).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!(pmf_pure(-1.0, &s1, &[0]).is_err());
        assert!(pmf_pure(1.0, &s1, &[0, 0]).is_err());
        // large counts stay finite in log space
        let p = pmf_pure(100.0, &s1, &[100]).unwrap();
        assert!(p > 0.0 && p < 0.05);
    }

    #[test]
    fn point_mass_mixture_is_bit_identical() {
        let sp = space(&[2.0, 3.0]);
        let pm = MixingMeasure::point_mass(1.3).unwrap();
        for k in [[0, 0], [1, 2], [5, 0], [7, 9]] {
            assert_eq!(
                pmf_mixed(&pm, &sp, &k).unwrap().to_bits(),
                pmf_pure(1.3, &sp, &k).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn gamma_mixture_is_geometric() {
        let g = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let sp = space(&[1.0]);
        for n in 0..3u32 {
            let closed = pmf_mixed(&g, &sp, &[n]).unwrap();
            assert!((closed - 0.5f64.powi(n as i32 + 1)).abs() < 1e-15);
            let quad = g.integrate(|s| pmf_pure(s, &sp, &[n]).unwrap());
            assert!((closed - quad).abs() < 1e-10, "n={n}: {closed} vs {quad}");
        }
    }

    #[test]
    fn gamma_mixture_matches_negative_binomial() {
        for (shape, rate, w) in [(2.0, 1.0, 2.0), (0.7, 2.5, 1.3), (5.0, 3.0, 0.5)] {
            let g = MixingMeasure::gamma(shape, rate).unwrap();
            let sp = space(&[w]);
            let oracle = nb_oracle(shape, rate, w, 50);
            for (k, expected) in oracle.iter().enumerate() {
                let got = pmf_mixed(&g, &sp, &[k as u32]).unwrap();
                assert!((got - expected).abs() <= 1e-10 * expected.max(1e-300) + 1e-300,
                    "k={k}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn birth_weight_gamma_closed_form_matches_quadrature() {
        let g = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let sp = space(&[0.7, 1.1]);
        for k in [[0u32, 0], [1, 0], [3, 2], [6, 1]] {
            let closed = ln_birth_weight(&g, &sp, &k).exp();
            let quad = g.integrate(|s| s * pmf_pure(s, &sp, &k).unwrap());
            assert!((closed - quad).abs() < 1e-10 * closed.max(1e-3), "{k:?}");
        }
    }

    #[test]
    fn box_normalization() {
        for m in battery() {
            let mass = m.box_mass();
            assert!(mass <= 1.0 + 1e-14);
            assert!(mass + m.tail_mass() >= 1.0 - 1e-12);
            assert!((mass - 1.0).abs() < 1e-10);
            assert!(m.tail_mass() < DEFAULT_TAIL_TARGET);
            assert!(m.pmf_table().iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn degenerate_models_have_one_state() {
        let m = TruncatedModel::build(
            space(&[1.0, 2.0]),
            MixingMeasure::point_mass(0.0).unwrap(),
            &TruncationPolicy::default(),
        )
        .unwrap();
        assert_eq!(m.state_count(), 1);
        assert_eq!(m.tail_mass(), 0.0);
        assert_eq!(m.pmf_table(), &[1.0]);
    }

    #[test]
    fn explicit_caps_report_their_tail() {
        let m = TruncatedModel::build(
            space(&[1.0]),
            MixingMeasure::point_mass(1.0).unwrap(),
            &TruncationPolicy::with_caps(vec![3]),
        )
        .unwrap();
        assert_eq!(m.state_count(), 4);
        // P(k > 3) for Poisson(1) is about 0.019; the Chernoff bound is above it
        assert!(m.tail_mass() > 0.019 && m.tail_mass() < 0.2);
        assert!(m.box_mass() + m.tail_mass() >= 1.0);
    }

    #[test]
    fn laplace_examples() {
        let sp = space(&[2.0]);
        let zero = sp.constant(0.0);
        assert_eq!(laplace_pure(1.0, &sp, &zero).unwrap(), 1.0);
        let f = TestFunction::new(vec![2.0f64.ln()]).unwrap();
        assert!((laplace_pure(1.0, &sp, &f).unwrap() - 2.0f64.exp()).abs() < 1e-12);
        let g = MixingMeasure::gamma(2.0, 1.0).unwrap();
        assert_eq!(laplace_mixed(&g, &sp, &zero).unwrap(), 1.0);
        // c = 2 (e^{ln 2} - 1) = 2 >= rate: the mgf diverges
        assert_eq!(laplace_mixed(&g, &sp, &f).unwrap(), f64::INFINITY);
    }

    #[test]
    fn laplace_box_sum_consistency() {
        for m in battery() {
            let f = TestFunction::new((0..m.space().len()).map(|i| -0.3 - 0.4 * i as f64).collect())
                .unwrap();
            let exact = m.expect(|k| f.pair(k).exp());
            let closed = laplace_mixed(m.mixing(), m.space(), &f).unwrap();
            assert!((exact - closed).abs() <= 1e-9f64.max(m.tail_mass()), "{exact} vs {closed}");
        }
    }

    #[test]
    fn rn_density_examples() {
        let sp = space(&[1.0]);
        let g0 = Configuration::empty(1);
        assert!((rn_density(1.0, 2.0, &sp, &g0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let g5 = Configuration::new(vec![5]);
        assert_eq!(rn_density(1.7, 1.7, &sp, &g5).unwrap(), 1.0);
        assert!(rn_density(0.0, 1.0, &sp, &g0).is_err());
        assert!(rn_density(1.0, 0.0, &sp, &g0).is_err());
    }

    #[test]
    fn rn_reweighting_is_a_change_of_measure() {
        let sp = space(&[0.5, 1.5]);
        for (s, t) in [(1.0f64, 2.0f64), (2.0, 1.0), (0.5, 3.0)] {
            let policy = TruncationPolicy::with_target(1e-15);
            // the box of the larger scale covers both laws
            let big = TruncatedModel::pure(sp.clone(), s.max(t), &policy).unwrap();
            let caps = TruncationPolicy::with_caps(big.count_box().caps().to_vec());
            let at_s = TruncatedModel::pure(sp.clone(), s, &caps).unwrap();
            let at_t = TruncatedModel::pure(sp.clone(), t, &caps).unwrap();
            let norm = at_s.expect(|k| rn_density_counts(s, t, sp.total_mass(), total(k)).unwrap());
            assert!((norm - 1.0).abs() < 1e-10, "{norm}");
            let f = |k: &[u32]| (-(k[0] as f64) * 0.3).exp() + (k[1] as f64 * 0.2).sin();
            let reweighted = at_s.expect(|k| f(k) * rn_density_counts(s, t, sp.total_mass(), total(k)).unwrap());
            let direct = at_t.expect(f);
            assert!((reweighted - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_moment_examples() {
        let g = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let sp = space(&[2.0]);
        let one = sp.constant(1.0);
        assert_eq!(linear_moments(&sp, &sp.constant(0.0), &g).unwrap(), (0.0, 0.0));
        assert_eq!(linear_moments(&sp, &one, &g).unwrap(), (4.0, 28.0));
        let pm = MixingMeasure::point_mass(1.0).unwrap();
        let s1 = space(&[1.0]);
        assert_eq!(linear_moments(&s1, &s1.constant(1.0), &pm).unwrap(), (1.0, 2.0));
        assert!(linear_moments(&s1, &s1.constant(-1.0), &pm).is_err());
    }

    #[test]
    fn linear_moments_match_box_sums() {
        for m in battery() {
            let f = TestFunction::new((0..m.space().len()).map(|i| 1.0 + 0.5 * i as f64).collect())
                .unwrap();
            let (first, second) = linear_moments(m.space(), &f, m.mixing()).unwrap();
            let [e1, e2] = m.box_sums(|k, p| {
                let v = f.pair(k);
                [p * v, p * v * v]
            });
            assert!((first - e1).abs() < 1e-8 * f64::max(first, 1.0), "{first} vs {e1}");
            assert!((second - e2).abs() < 1e-8 * f64::max(second, 1.0), "{second} vs {e2}");
        }
    }

    #[test]
    fn pure_sampling_moments() {
        let sp = space(&[2.0]);
        let mut rng = StreamFactory::new(5, "pure").stream(0);
        assert_eq!(sample_pure(0.0, &sp, &mut rng).unwrap().counts, vec![0]);
        assert!(sample_pure(-0.1, &sp, &mut rng).is_err());
        let mut acc = Accumulator::default();
        let mut sq = Accumulator::default();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_pure(1.0, &sp, &mut rng).unwrap().counts[0] as f64)
            .collect();
        draws.iter().for_each(|x| acc.push(*x));
        assert!((acc.mean - 2.0).abs() / acc.std_error() < 4.0);
        // variance: mean of (x - 2)^2 against 2; its standard error from the 4th moment
        draws.iter().for_each(|x| sq.push((x - 2.0).powi(2)));
        assert!((sq.mean - 2.0).abs() / sq.std_error() < 4.0);
    }

    #[test]
    fn mixed_sampling_matches_pmf() {
        let sp = space(&[1.5]);
        let g = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let p0 = (1.0f64 / 2.5).powi(2);
        assert!((pmf_mixed(&g, &sp, &[0]).unwrap() - p0).abs() < 1e-15);
        let mut rng = StreamFactory::new(6, "mixed").stream(0);
        let mut acc = Accumulator::default();
        for _ in 0..100_000 {
            let c = sample_mixed(&g, &sp, &mut rng);
            assert!(c.latent_scale.is_some());
            acc.push(if c.counts[0] == 0 { 1.0 } else { 0.0 });
        }
        assert!((acc.mean - p0).abs() / acc.std_error() < 4.0);
        let z = MixingMeasure::finite_discrete(vec![(0.0, 1.0)]).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_mixed(&z, &sp, &mut rng).counts, vec![0]);
        }
    }

    #[test]
    fn configuration_shifts() {
        let c = Configuration::new(vec![0, 2]);
        assert_eq!(c.added(0).counts, vec![1, 2]);
        assert!(c.removed(0).is_none());
        assert_eq!(c.removed(1).unwrap().counts, vec![0, 1]);
        assert_eq!(c.total_count(), 2);
    }

    #[test]
    fn pmf_csv_has_one_row_per_state() {
        let m = TruncatedModel::build(
            space(&[1.0, 0.5]),
            MixingMeasure::point_mass(0.5).unwrap(),
            &TruncationPolicy::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_pmf_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k_0,k_1,probability");
        assert_eq!(lines.count(), m.state_count());
    }

    #[test]
    fn budget_detects_super_exponential_growth() {
        let m = TruncatedModel::build(
            space(&[1.0]),
            MixingMeasure::point_mass(1.0).unwrap(),
            &TruncationPolicy::default(),
        )
        .unwrap();
        assert!(m.truncation_budget(|k| k[0] as f64).unwrap() < 1e-9);
        assert!(matches!(
            m.truncation_budget(|k| ((k[0] as f64).powi(2)).exp()),
            Err(Error::BudgetOverflow(_))
        ));
    }

    proptest! {
        #[test]
        fn box_index_roundtrip(caps in prop::collection::vec(0u32..6, 1..4), seed in 0usize..10_000) {
            let b = CountBox::new(caps).unwrap();
            let idx = seed % b.len();
            let k = b.state(idx);
            prop_assert!(b.contains(&k));
            prop_assert_eq!(b.index(&k), idx);
        }
    }
}
