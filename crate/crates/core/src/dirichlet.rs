//! Variance and Dirichlet energy on a truncated model, exact and by Monte
//! Carlo, together with the Mecke identity tester and the scale-derivative
//! check.

use crate::base_space::{BaseSpace, TestFunction};
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::mixing::MixingMeasure;
use crate::poisson::{sample_counts, total, TruncatedModel, TruncationPolicy};
use crate::rng::StreamFactory;
use crate::stats::{run_chunked, Accumulator, EstimateWithCI, Method, PairAccumulator};
use serde::Serialize;
use std::fmt;
use std::sync::Arc;

pub const DEFAULT_MC_SAMPLES: u64 = 100_000;
const MECKE_TOLERANCE: f64 = 1e-9;

/// A kernel H(γ, x_i) for the Mecke identity.
#[derive(Clone)]
pub struct TestKernel {
    label: String,
    eval: Arc<dyn Fn(&[u32], usize) -> f64 + Send + Sync>,
}

impl fmt::Debug for TestKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestKernel").field("label", &self.label).finish()
    }
}

impl TestKernel {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(&[u32], usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn one() -> Self {
        Self::new("1", |_, _| 1.0)
    }

    /// H(γ, x) = γ(X).
    pub fn total_count() -> Self {
        Self::new("γ(X)", |k, _| total(k) as f64)
    }

    /// H(γ, x) = 1{γ(X) = 0}.
    pub fn empty_indicator() -> Self {
        Self::new("1{γ(X)=0}", |k, _| if total(k) == 0 { 1.0 } else { 0.0 })
    }

    /// H(γ, x) = 1{γ(X) = 1}.
    pub fn singleton_indicator() -> Self {
        Self::new("1{γ(X)=1}", |k, _| if total(k) == 1 { 1.0 } else { 0.0 })
    }

    /// H(γ, x) = f(x) e^{−γ(X)}.
    pub fn weighted_exp(f: TestFunction) -> Self {
        Self::new(format!("f(x)exp(-γ(X)), f={:?}", f.values()), move |k, i| {
            f.get(i) * (-(total(k) as f64)).exp()
        })
    }

    /// H(γ, x_i) = k_i.
    pub fn count_at() -> Self {
        Self::new("γ({x})", |k, i| k[i] as f64)
    }

    /// H(γ, x) = min(γ(h), cap) h(x).
    pub fn capped_linear(h: TestFunction, cap: f64) -> Self {
        Self::new(format!("min(γ(h),{cap})h(x), h={:?}", h.values()), move |k, i| {
            h.pair(k).min(cap) * h.get(i)
        })
    }

    /// The standard battery on a space with `atoms` atoms.
    pub fn battery(atoms: usize) -> Vec<Self> {
        let f = TestFunction::new((0..atoms).map(|i| 1.0 + 0.5 * i as f64).collect())
            .expect("finite values");
        let h = TestFunction::new((0..atoms).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect())
            .expect("finite values");
        vec![
            Self::one(),
            Self::total_count(),
            Self::empty_indicator(),
            Self::singleton_indicator(),
            Self::weighted_exp(f),
            Self::count_at(),
            Self::capped_linear(h, 3.0),
        ]
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, k: &[u32], atom: usize) -> f64 {
        (self.eval)(k, atom)
    }
}

/// Σ_i w_i a_i(k) b_i(k) where a, b are the up-shift increments of F and G.
fn increment_product(f: &Functional, g: &Functional, weights: &[f64], k: &[u32]) -> f64 {
    let mut buf = k.to_vec();
    let (f0, g0) = (f.eval_counts(k), g.eval_counts(k));
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        buf[i] += 1;
        acc += w * (f.eval_counts(&buf) - f0) * (g.eval_counts(&buf) - g0);
        buf[i] -= 1;
    }
    acc
}

/// Σ_i w_i (F(k + e_i) − F(k)).
fn increment_sum(f: &Functional, weights: &[f64], k: &[u32]) -> f64 {
    let mut buf = k.to_vec();
    let f0 = f.eval_counts(k);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        buf[i] += 1;
        acc += w * (f.eval_counts(&buf) - f0);
        buf[i] -= 1;
    }
    acc
}

/// E(F, G) = Σ_k [∫ s π_{sμ}(k) λ(ds)] Σ_i w_i (F(k+e_i) − F(k))(G(k+e_i) − G(k)).
pub fn form_exact(f: &Functional, g: &Functional, model: &TruncatedModel) -> Result<EstimateWithCI> {
    let weights = model.space().weights();
    let point = model.box_sum(|k, p| {
        if p == 0.0 {
            return 0.0;
        }
        let d = increment_product(f, g, weights, k);
        if d == 0.0 {
            0.0
        } else {
            model.birth_weight(k) * d
        }
    });
    // Per-state integrand relative to π(k): the posterior scale mean times the increments.
    let budget = model.truncation_budget(|k| {
        let d = increment_product(f, g, weights, k).abs();
        if d == 0.0 {
            return 0.0;
        }
        let p = crate::poisson::pmf_mixed(model.mixing(), model.space(), k).unwrap_or(0.0);
        if p > 0.0 {
            model.birth_weight(k) / p * d
        } else {
            0.0
        }
    })?;
    Ok(EstimateWithCI::exact(point, budget))
}

pub fn energy_exact(f: &Functional, model: &TruncatedModel) -> Result<EstimateWithCI> {
    form_exact(f, f, model)
}

fn check_samples(n: u64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Monte Carlo needs at least 2 samples, got {n}"
        )));
    }
    Ok(())
}

/// Mean of s Σ_i w_i (F(γ+e_i) − F(γ))² over (s, γ) ~ λ ⊗ π_{sμ}.
pub fn energy_mc(
    f: &Functional,
    model: &TruncatedModel,
    n: u64,
    streams: &StreamFactory,
) -> Result<EstimateWithCI> {
    check_samples(n)?;
    let (space, mixing) = (model.space(), model.mixing());
    let acc = run_chunked(n, streams, |rng, acc: &mut Accumulator| {
        let s = mixing.sample_scale(rng);
        let k = sample_counts(s, space, rng);
        acc.push(s * increment_product(f, f, space.weights(), &k));
    });
    Ok(acc.estimate(Method::McBirth))
}

/// Mean of Σ_i k_i (F(γ) − F(γ−e_i))², skipping empty coordinates.
pub fn energy_mc_death(
    f: &Functional,
    model: &TruncatedModel,
    n: u64,
    streams: &StreamFactory,
) -> Result<EstimateWithCI> {
    check_samples(n)?;
    let (space, mixing) = (model.space(), model.mixing());
    let acc = run_chunked(n, streams, |rng, acc: &mut Accumulator| {
        let s = mixing.sample_scale(rng);
        let mut k = sample_counts(s, space, rng);
        let f0 = f.eval_counts(&k);
        let mut v = 0.0;
        for i in 0..k.len() {
            if k[i] == 0 {
                continue;
            }
            k[i] -= 1;
            let d = f0 - f.eval_counts(&k);
            k[i] += 1;
            v += k[i] as f64 * d * d;
        }
        acc.push(v);
    });
    Ok(acc.estimate(Method::McDeath))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Mc,
}

/// Var_{π_{λ,μ}}(F), by a two-pass box sum or by Monte Carlo.
pub fn variance(
    f: &Functional,
    model: &TruncatedModel,
    mode: Mode,
    n: u64,
    streams: &StreamFactory,
) -> Result<EstimateWithCI> {
    match mode {
        Mode::Exact => variance_exact(f, model),
        Mode::Mc => variance_mc(f, model, n, streams),
    }
}

pub fn variance_exact(f: &Functional, model: &TruncatedModel) -> Result<EstimateWithCI> {
    let mass = model.box_mass();
    let mean = model.expect(|k| f.eval_counts(k)) / mass;
    let point = model.expect(|k| (f.eval_counts(k) - mean).powi(2)) / mass;
    let budget = model.truncation_budget(|k| f.eval_counts(k).powi(2))?
        + 2.0 * mean.abs() * model.truncation_budget(|k| f.eval_counts(k))?;
    Ok(EstimateWithCI::exact(point.max(0.0), budget))
}

/// Sample variance with a delta-method standard error from the joint
/// moments of (F, F²).
pub fn variance_mc(
    f: &Functional,
    model: &TruncatedModel,
    n: u64,
    streams: &StreamFactory,
) -> Result<EstimateWithCI> {
    check_samples(n)?;
    let (space, mixing) = (model.space(), model.mixing());
    let acc = run_chunked(n, streams, |rng, acc: &mut PairAccumulator| {
        let s = mixing.sample_scale(rng);
        let k = sample_counts(s, space, rng);
        let v = f.eval_counts(&k);
        acc.push(v, v * v);
    });
    let nf = acc.n as f64;
    let point = acc.m2_x / (nf - 1.0);
    let mu = acc.mean_x;
    let (vxx, vyy, vxy) = (acc.m2_x / (nf - 1.0), acc.m2_y / (nf - 1.0), acc.cxy / (nf - 1.0));
    // Gradient of (a, b) ↦ b − a² at the sample means.
    let g: f64 = -2.0 * mu;
    let var = (g * g * vxx + vyy + 2.0 * g * vxy).max(0.0);
    Ok(EstimateWithCI {
        point,
        std_error: (var / nf).sqrt(),
        n_samples: acc.n,
        method: Method::Mc,
        budget: 0.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MeckeSide {
    /// Scale of a pure model; absent for the mixed law.
    pub s: Option<f64>,
    pub mass: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub budget: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeckeMc {
    pub lhs: EstimateWithCI,
    pub rhs: EstimateWithCI,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeckeReport {
    pub kernel: String,
    pub nodes: Vec<MeckeSide>,
    pub mixed: MeckeSide,
    pub mc: Option<MeckeMc>,
    pub pass: bool,
}

/// Both sides of the Mecke identity on one model. For a pure model at scale
/// s the left side weight π_{sμ}(k)·s is used; for the mixed law it is the
/// birth weight ∫ s π_{sμ}(k) λ(ds).
fn mecke_sides(h: &TestKernel, model: &TruncatedModel, s: Option<f64>, mass: f64) -> Result<MeckeSide> {
    let weights = model.space().weights();
    let [lhs, rhs] = model.box_sums(|k, p| {
        if p == 0.0 {
            return [0.0, 0.0];
        }
        let mut buf = k.to_vec();
        let mut up = 0.0;
        let mut at = 0.0;
        for (i, w) in weights.iter().enumerate() {
            buf[i] += 1;
            up += w * h.eval(&buf, i);
            buf[i] -= 1;
            if k[i] > 0 {
                at += k[i] as f64 * h.eval(k, i);
            }
        }
        let bw = match s {
            Some(s) => s * p,
            None => model.birth_weight(k),
        };
        [bw * up, p * at]
    });
    let total_mass = model.space().total_mass();
    let budget = model.truncation_budget(|k| {
        let rate = match s {
            Some(s) => s,
            None => model
                .mixing()
                .posterior_scale_mean(total_mass, total(k))
                .unwrap_or(model.mixing().s_max()),
        };
        let mut buf = k.to_vec();
        let mut v = 0.0;
        for (i, w) in weights.iter().enumerate() {
            buf[i] += 1;
            v += rate * w * h.eval(&buf, i).abs() + k[i] as f64 * h.eval(k, i).abs();
            buf[i] -= 1;
        }
        v
    })?;
    let abs_gap = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs());
    let rel_gap = if scale > 0.0 { abs_gap / scale } else { 0.0 };
    Ok(MeckeSide {
        s,
        mass,
        lhs,
        rhs,
        abs_gap,
        rel_gap,
        budget,
        pass: abs_gap <= MECKE_TOLERANCE * scale.max(1.0) + budget,
    })
}

/// Checks ∫H(γ+δ_x, x) π(dγ) sμ(dx) = ∫H(γ, x) γ(dx) π(dγ) exactly for each
/// scale node of the mixing measure and for the mixed law, and optionally by
/// Monte Carlo.
pub fn mecke_test(
    h: &TestKernel,
    model: &TruncatedModel,
    mc: Option<(u64, &StreamFactory)>,
) -> Result<MeckeReport> {
    let policy = TruncationPolicy::with_target(model.tail_mass().max(1e-15));
    let mut nodes = Vec::with_capacity(model.mixing().support().len());
    for node in model.mixing().support() {
        let pure = if model.mixing().is_point_mass().is_some() {
            model.clone()
        } else {
            TruncatedModel::pure(model.space().clone(), node.s, &policy)?
        };
        nodes.push(mecke_sides(h, &pure, Some(node.s), node.mass)?);
    }
    let mixed = mecke_sides(h, model, None, 1.0)?;
    let mc = match mc {
        None => None,
        Some((n, streams)) => {
            check_samples(n)?;
            let (space, mixing) = (model.space(), model.mixing());
            let accs = run_chunked(n, streams, |rng, acc: &mut [Accumulator; 3]| {
                let s = mixing.sample_scale(rng);
                let mut k = sample_counts(s, space, rng);
                let mut up = 0.0;
                let mut at = 0.0;
                for (i, w) in space.weights().iter().enumerate() {
                    if k[i] > 0 {
                        at += k[i] as f64 * h.eval(&k, i);
                    }
                    k[i] += 1;
                    up += s * w * h.eval(&k, i);
                    k[i] -= 1;
                }
                acc[0].push(up);
                acc[1].push(at);
                acc[2].push(up - at);
            });
            let diff = accs[2].estimate(Method::Mc);
            let z = diff.z_to(0.0);
            Some(MeckeMc {
                lhs: accs[0].estimate(Method::McBirth),
                rhs: accs[1].estimate(Method::McDeath),
                z,
                pass: z < 4.0,
            })
        }
    };
    let pass = nodes.iter().all(|n| n.pass) && mixed.pass && mc.as_ref().is_none_or(|m| m.pass);
    Ok(MeckeReport {
        kernel: h.label().to_string(),
        nodes,
        mixed,
        mc,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleDerivative {
    pub s: f64,
    pub h: f64,
    /// Central difference of s ↦ π_{sμ}(F).
    pub fd: f64,
    /// ∫(F(γ+δ_x) − F(γ)) π_{sμ}(dγ) μ(dx).
    pub bd: f64,
    pub gap: f64,
}

/// Compares d/ds π_{sμ}(F) by central differences with the birth-increment
/// integral, all three box sums sharing the box certified at s + h.
pub fn scale_derivative(f: &Functional, s: f64, space: &BaseSpace, h: f64) -> Result<ScaleDerivative> {
    if f.sup_bound().is_none() {
        return Err(Error::UnboundedFunctional(f.label().to_string()));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
    }
    if !(h > 0.0 && h < s / 10.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} must lie in (0, s/10) for s = {s}"
        )));
    }
    let top = TruncatedModel::pure(space.clone(), s + h, &TruncationPolicy::with_target(1e-16))?;
    let shared = TruncationPolicy::with_caps(top.count_box().caps().to_vec());
    let low = TruncatedModel::pure(space.clone(), s - h, &shared)?;
    let mid = TruncatedModel::pure(space.clone(), s, &shared)?;
    let value = |m: &TruncatedModel| m.expect(|k| f.eval_counts(k));
    let fd = (value(&top) - value(&low)) / (2.0 * h);
    let bd = mid.expect(|k| increment_sum(f, space.weights(), k));
    Ok(ScaleDerivative {
        s,
        h,
        fd,
        bd,
        gap: (fd - bd).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CauchySchwarzNode {
    pub s: f64,
    /// (∫(F(γ+δ_x) − F(γ)) π_{sμ}(dγ) μ(dx))².
    pub lhs: f64,
    /// μ(X) ∫(F(γ+δ_x) − F(γ))² π_{sμ}(dγ) μ(dx).
    pub rhs: f64,
    pub pass: bool,
}

/// The Cauchy–Schwarz bound on the birth increment, per scale node.
pub fn cauchy_schwarz_nodes(f: &Functional, space: &BaseSpace, mixing: &MixingMeasure) -> Result<Vec<CauchySchwarzNode>> {
    let weights = space.weights();
    let mass = space.total_mass();
    let policy = TruncationPolicy::default();
    let mut out = Vec::with_capacity(mixing.support().len());
    for node in mixing.support() {
        let pure = TruncatedModel::pure(space.clone(), node.s, &policy)?;
        let [a, b] = pure.box_sums(|k, p| {
            if p == 0.0 {
                return [0.0, 0.0];
            }
            [p * increment_sum(f, weights, k), p * increment_product(f, f, weights, k)]
        });
        let (lhs, rhs) = (a * a, mass * b);
        out.push(CauchySchwarzNode {
            s: node.s,
            lhs,
            rhs,
            pass: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
        });
    }
    Ok(out)
}
