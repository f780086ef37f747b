//! Verification drivers: the Poincaré and weak Poincaré inequalities for
//! mixed Poisson laws, the sharpness of the constant in the pure case, and
//! the counterexample to the defective inequality
//! π(F²) ≤ C₁E(F,F) + C₂π(|F|)².

use crate::base_space::{BaseSpace, TestFunction};
use crate::dirichlet::{energy_exact, variance_exact, variance_mc};
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::mixing::{MixingMeasure, WeakRate};
use crate::par;
use crate::poisson::{TruncatedModel, TruncationPolicy};
use crate::rng::StreamFactory;
use crate::stats::{EstimateWithCI, Method};
use serde::Serialize;

/// Safety factor applied to a grid-estimated constant before asserting the
/// Poincaré inequality.
pub const CONSTANT_SAFETY: f64 = 1.05;
/// Largest number of scale nodes for the within/between variance split.
const SPLIT_NODE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PtiParams {
    pub c1: f64,
    pub c2: f64,
}

/// Total variance split as ∫Var_{π_{sμ}}(F)λ(ds) + Var_λ(π_{sμ}(F)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceSplit {
    pub within: f64,
    pub between: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub case: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub pass: bool,
    pub method: Method,
    pub budget: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<VarianceSplit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_lhs: Option<EstimateWithCI>,
}

/// The most nearly violated r for one functional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightestR {
    pub case: String,
    pub r: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleSummary {
    pub c1: f64,
    pub c2: f64,
    pub m1: f64,
    pub m2: f64,
    /// First weight at which the inequality fails.
    pub first_violation: Option<f64>,
    pub limit: f64,
    /// |ratio − 1/C₁| at the smallest weight.
    pub final_gap: f64,
    pub monotone: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub inequality: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    pub cases: Vec<CaseRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tightest: Vec<TightestR>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<CounterexampleSummary>,
    pub pass: bool,
}

struct Exact {
    variance: EstimateWithCI,
    energy: EstimateWithCI,
}

fn exact_pair(f: &Functional, model: &TruncatedModel) -> Result<Exact> {
    Ok(Exact {
        variance: variance_exact(f, model)?,
        energy: energy_exact(f, model)?,
    })
}

/// Per-node pure models used for the within/between split.
fn split_models(model: &TruncatedModel) -> Result<Option<Vec<(f64, TruncatedModel)>>> {
    let support = model.mixing().support();
    if support.len() > SPLIT_NODE_LIMIT {
        return Ok(None);
    }
    let policy = TruncationPolicy::with_target(model.tail_mass().max(1e-15));
    let mut out = Vec::with_capacity(support.len());
    for node in support {
        if node.mass > 0.0 {
            out.push((node.mass, TruncatedModel::pure(model.space().clone(), node.s, &policy)?));
        }
    }
    Ok(Some(out))
}

fn variance_split(f: &Functional, nodes: &[(f64, TruncatedModel)]) -> VarianceSplit {
    let (mut within, mut mean, mut second) = (0.0, 0.0, 0.0);
    for (mass, m) in nodes {
        let box_mass = m.box_mass();
        let mu = m.expect(|k| f.eval_counts(k)) / box_mass;
        let var = m.expect(|k| (f.eval_counts(k) - mu).powi(2)) / box_mass;
        within += mass * var;
        mean += mass * mu;
        second += mass * mu * mu;
    }
    VarianceSplit {
        within,
        between: (second - mean * mean).max(0.0),
    }
}

fn rounding(lhs: f64, rhs: f64) -> f64 {
    1e-12 * lhs.abs().max(rhs.abs()).max(1e-300)
}

/// Checks Var(F) ≤ (1 + Cμ(X))E(F,F) on each functional by exact box sums,
/// optionally with a Monte Carlo cross-check of the variance.
pub fn verify_poincare(
    model: &TruncatedModel,
    c: f64,
    battery: &[Functional],
    mc: Option<(u64, &StreamFactory)>,
) -> Result<VerificationReport> {
    if c.is_infinite() {
        return Err(Error::HypothesisUnmet(
            "the mixing measure admits no finite weighted Poincaré constant".into(),
        ));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidArgument(format!("constant must be >= 0, got {c}")));
    }
    if battery.is_empty() {
        return Err(Error::InvalidArgument("empty functional battery".into()));
    }
    let factor = 1.0 + c * model.space().total_mass();
    let nodes = split_models(model)?;
    let cases = par::map_slice(battery, |f| -> Result<CaseRecord> {
        let ex = exact_pair(f, model)?;
        let lhs = ex.variance.point;
        let rhs = factor * ex.energy.point;
        let budget = ex.variance.budget + factor * ex.energy.budget + rounding(lhs, rhs);
        let margin = rhs - lhs;
        let mc_lhs = match mc {
            Some((n, streams)) => Some(variance_mc(f, model, n, &streams.child(f.label()))?),
            None => None,
        };
        Ok(CaseRecord {
            case: f.label().to_string(),
            r: None,
            w: None,
            lhs,
            rhs,
            margin,
            ratio: None,
            pass: margin >= -budget,
            method: Method::Exact,
            budget,
            split: nodes.as_ref().map(|n| variance_split(f, n)),
            mc_lhs,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let pass = cases.iter().all(|c| c.pass);
    Ok(VerificationReport {
        inequality: "poincare".into(),
        constant: Some(c),
        cases,
        tightest: Vec::new(),
        counterexample: None,
        pass,
    })
}

/// Checks Var(F) ≤ (1 + μ(X)α(r))E(F,F) + r‖F‖_u² for every (F, r).
pub fn verify_weak_poincare(
    model: &TruncatedModel,
    alpha: &WeakRate,
    r_grid: &[f64],
    battery: &[Functional],
) -> Result<VerificationReport> {
    if battery.is_empty() || r_grid.is_empty() {
        return Err(Error::InvalidArgument("empty functional battery or r grid".into()));
    }
    let sups = battery
        .iter()
        .map(|f| f.sup_bound().ok_or_else(|| Error::UnboundedFunctional(f.label().to_string())))
        .collect::<Result<Vec<_>>>()?;
    let alphas = r_grid.iter().map(|r| alpha.eval(*r)).collect::<Result<Vec<_>>>()?;
    let mass = model.space().total_mass();
    let exact = par::map_slice(battery, |f| exact_pair(f, model))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut cases = Vec::with_capacity(battery.len() * r_grid.len());
    let mut tightest = Vec::with_capacity(battery.len());
    for ((f, ex), sup) in battery.iter().zip(&exact).zip(&sups) {
        let mut worst: Option<TightestR> = None;
        for (r, a) in r_grid.iter().zip(&alphas) {
            let factor = 1.0 + mass * a;
            let lhs = ex.variance.point;
            let rhs = factor * ex.energy.point + r * sup * sup;
            let margin = rhs - lhs;
            let budget = ex.variance.budget + factor * ex.energy.budget + rounding(lhs, rhs);
            if worst.as_ref().is_none_or(|w| margin < w.margin) {
                worst = Some(TightestR {
                    case: f.label().to_string(),
                    r: *r,
                    margin,
                });
            }
            cases.push(CaseRecord {
                case: f.label().to_string(),
                r: Some(*r),
                w: None,
                lhs,
                rhs,
                margin,
                ratio: None,
                pass: margin >= -budget,
                method: Method::Exact,
                budget,
                split: None,
                mc_lhs: None,
            });
        }
        tightest.extend(worst);
    }
    let pass = cases.iter().all(|c| c.pass);
    Ok(VerificationReport {
        inequality: "weak_poincare".into(),
        constant: None,
        cases,
        tightest,
        counterexample: None,
        pass,
    })
}

/// Weights 10^{-1}, 10^{-2}, …, 10^{-8}.
pub fn default_counterexample_weights() -> Vec<f64> {
    (1..=8).map(|j| 10f64.powi(-j)).collect()
}

/// Evaluates both sides of the defective inequality for F = γ(1_A) with
/// μ(A) = w along a decreasing weight sequence, in closed form.
pub fn pti_counterexample(mixing: &MixingMeasure, weights: &[f64], params: PtiParams) -> Result<VerificationReport> {
    let PtiParams { c1, c2 } = params;
    if !(c1.is_finite() && c2.is_finite()) {
        return Err(Error::InvalidArgument("C1 and C2 must be finite".into()));
    }
    if c1 >= 1.0 {
        return Err(Error::HypothesisUnmet(format!(
            "the counterexample needs C1 < 1, got {c1}"
        )));
    }
    if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive and finite".into()));
    }
    let m1 = mixing.moment(1)?;
    let m2 = mixing.moment(2)?;
    if !(m1 > 0.0 && m2 > 0.0 && m1.is_finite() && m2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "the counterexample needs 0 < m1, m2 < ∞ (m1 = {m1}, m2 = {m2})"
        )));
    }
    let limit = 1.0 / c1;
    let cases: Vec<CaseRecord> = weights
        .iter()
        .map(|&w| {
            let lhs = w * w * m2 + w * m1;
            let rhs = c1 * w * m1 + c2 * w * w * m1 * m1;
            let violated = lhs > rhs;
            CaseRecord {
                case: format!("w={w:e}"),
                r: None,
                w: Some(w),
                lhs,
                rhs,
                margin: rhs - lhs,
                ratio: Some(lhs / rhs),
                pass: !violated,
                method: Method::Exact,
                budget: 0.0,
                split: None,
                mc_lhs: None,
            }
        })
        .collect();
    let mut order: Vec<&CaseRecord> = cases.iter().collect();
    order.sort_by(|a, b| b.w.unwrap().total_cmp(&a.w.unwrap()));
    let ratios: Vec<f64> = order.iter().map(|c| c.ratio.unwrap()).collect();
    let first_violation = order.iter().find(|c| !c.pass).and_then(|c| c.w);
    let final_gap = (ratios.last().copied().unwrap() - limit).abs();
    let monotone = ratios.windows(2).all(|p| p[1] >= p[0] - 1e-15 * p[0].abs());
    let converged = final_gap < 1e-6;
    let summary = CounterexampleSummary {
        c1,
        c2,
        m1,
        m2,
        first_violation,
        limit,
        final_gap,
        monotone,
        converged,
    };
    Ok(VerificationReport {
        inequality: "pti_counterexample".into(),
        constant: None,
        pass: first_violation.is_some() && converged,
        cases,
        tightest: Vec::new(),
        counterexample: Some(summary),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PtiBoxCheck {
    pub w: f64,
    pub second_moment_box: f64,
    pub second_moment_closed: f64,
    pub energy_box: f64,
    pub energy_closed: f64,
    pub max_abs_error: f64,
}

/// Recomputes π(F²) and E(F,F) for F = γ(1_A) by exact box sums, with A a
/// new atom of weight w appended to `base`.
pub fn pti_box_check(mixing: &MixingMeasure, base: &BaseSpace, w: f64, policy: &TruncationPolicy) -> Result<PtiBoxCheck> {
    let space = base.with_atom(w)?;
    let a = space.indicator(&[space.len() - 1])?;
    let (m1, m2) = (mixing.moment(1)?, mixing.moment(2)?);
    let model = TruncatedModel::build(space, mixing.clone(), policy)?;
    let f = Functional::linear(a.clone());
    let second_moment_box = model.expect(|k| a.pair(k).powi(2));
    let energy_box = energy_exact(&f, &model)?.point;
    let second_moment_closed = w * w * m2 + w * m1;
    let energy_closed = w * m1;
    Ok(PtiBoxCheck {
        w,
        second_moment_box,
        second_moment_closed,
        energy_box,
        energy_closed,
        max_abs_error: (second_moment_box - second_moment_closed)
            .abs()
            .max((energy_box - energy_closed).abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharpnessReport {
    pub s: f64,
    pub variance: f64,
    pub energy: f64,
    /// Var/E; absent when both vanish.
    pub ratio: Option<f64>,
    pub exact_equality: bool,
    pub pass: bool,
}

/// Var(γ(f)) and E(γ(f), γ(f)) under π_{sμ}; both equal s·μ(f²).
pub fn sharpness_witness(space: &BaseSpace, s: f64, f: &TestFunction) -> Result<SharpnessReport> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
    }
    space.check_dim(f)?;
    let model = TruncatedModel::pure(space.clone(), s, &TruncationPolicy::default())?;
    let lin = Functional::linear(f.clone());
    let variance = variance_exact(&lin, &model)?.point;
    let energy = energy_exact(&lin, &model)?.point;
    let both_zero = variance == 0.0 && energy == 0.0;
    let ratio = (!both_zero).then(|| variance / energy);
    let pass = both_zero || (variance - energy).abs() <= 1e-10 * energy.abs().max(1.0);
    Ok(SharpnessReport {
        s,
        variance,
        energy,
        ratio,
        exact_equality: both_zero || variance == energy,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tf(v: &[f64]) -> TestFunction {
        TestFunction::new(v.to_vec()).unwrap()
    }

    fn model(weights: &[f64], mixing: MixingMeasure) -> TruncatedModel {
        TruncatedModel::build(BaseSpace::new(weights.to_vec()).unwrap(), mixing, &TruncationPolicy::default())
            .unwrap()
    }

    fn bounded_battery(n: usize) -> Vec<Functional> {
        let f = tf(&(0..n).map(|i| 1.0 - 0.6 * i as f64).collect::<Vec<_>>());
        let ones = tf(&vec![1.0; n]);
        vec![
            Functional::exp_neg(ones.clone()).unwrap(),
            Functional::tanh(f.clone()).unwrap(),
            Functional::cos(f.clone()).unwrap(),
            Functional::indicator(ones, 1.0),
            Functional::clipped(f, -1.0, 2.0).unwrap(),
        ]
    }

    #[test]
    fn pure_poisson_examples() {
        let m = model(&[0.5, 1.5], MixingMeasure::point_mass(1.0).unwrap());
        let lin = Functional::linear(tf(&[1.0, -2.0]));
        let e = Functional::exp_neg(tf(&[1.0, 1.0])).unwrap();
        let r = verify_poincare(&m, 0.0, &[lin, e], None).unwrap();
        assert!(r.pass);
        assert!(r.cases[0].margin.abs() < 1e-10);
        assert!(r.cases[1].margin > 1e-3);
    }

    #[test]
    fn gamma_battery_with_oracle_constant() {
        let m = model(&[0.5], MixingMeasure::gamma(2.0, 3.0).unwrap());
        let mut battery = bounded_battery(1);
        battery.push(Functional::linear(tf(&[1.0])));
        let r = verify_poincare(&m, 1.0 / 3.0, &battery, None).unwrap();
        for c in &r.cases {
            assert!(c.margin >= -1e-8, "{c:?}");
            let split = c.split.unwrap();
            assert!((split.within + split.between - c.lhs).abs() < 1e-8 * c.lhs.max(1.0), "{c:?}");
        }
        // Linear F is extremal for the single-atom Gamma chain.
        assert!(r.cases.last().unwrap().margin.abs() < 1e-10);
    }

    #[test]
    fn estimated_constant_never_fails() {
        for (weights, mixing) in [
            (vec![0.5], MixingMeasure::gamma(2.0, 3.0).unwrap()),
            (vec![0.4, 0.6], MixingMeasure::gamma(1.0, 1.0).unwrap()),
            (vec![1.0, 0.3], MixingMeasure::gamma(3.0, 2.0).unwrap()),
        ] {
            let c = mixing.estimate_con1_constant(&mixing.default_grid(800)).unwrap().value();
            let m = model(&weights, mixing);
            let mut battery = bounded_battery(weights.len());
            battery.push(Functional::linear(tf(&vec![1.0; weights.len()])));
            let r = verify_poincare(&m, c * CONSTANT_SAFETY, &battery, None).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn infinite_constant_is_refused() {
        let mixing = MixingMeasure::finite_discrete(vec![(0.5, 0.5), (2.0, 0.5)]).unwrap();
        let c = mixing.estimate_con1_constant(&[]).unwrap().value();
        let m = model(&[1.0], mixing);
        assert!(matches!(
            verify_poincare(&m, c, &bounded_battery(1), None),
            Err(Error::HypothesisUnmet(_))
        ));
    }

    #[test]
    fn weak_examples() {
        let m = model(&[0.7, 0.3], MixingMeasure::gamma(1.0, 1.0).unwrap());
        let battery = bounded_battery(2);
        let trivial = verify_weak_poincare(&m, &WeakRate::Constant(0.0), &[1.0, 2.0], &battery).unwrap();
        assert!(trivial.pass);
        let c = MixingMeasure::gamma(1.0, 1.0).unwrap();
        let c = c.estimate_con1_constant(&c.default_grid(1500)).unwrap().value() * CONSTANT_SAFETY;
        let r_grid = [1e-6, 1e-3, 0.1, 1.0];
        let weak = verify_weak_poincare(&m, &WeakRate::Constant(c), &r_grid, &battery).unwrap();
        assert!(weak.pass);
        assert_eq!(weak.tightest.len(), battery.len());
        assert!(weak.tightest.iter().all(|t| t.r == 1e-6));
        let strong = verify_poincare(&m, c, &battery, None).unwrap();
        for (i, s) in strong.cases.iter().enumerate() {
            for (j, r) in r_grid.iter().enumerate() {
                let w = &weak.cases[i * r_grid.len() + j];
                let sup = battery[i].sup_bound().unwrap();
                assert!((w.margin - r * sup * sup - s.margin).abs() < 1e-12, "{w:?} {s:?}");
            }
        }
        let unbounded = [Functional::linear(tf(&[1.0, 1.0]))];
        assert!(matches!(
            verify_weak_poincare(&m, &WeakRate::Constant(1.0), &[0.5], &unbounded),
            Err(Error::UnboundedFunctional(_))
        ));
    }

    #[test]
    fn alpha_term_is_load_bearing() {
        let mixing = MixingMeasure::finite_discrete(vec![(0.5, 0.5), (3.0, 0.5)]).unwrap();
        let m = model(&[1.0, 1.0], mixing);
        let f = Functional::clipped(tf(&[1.0, 1.0]), 0.0, 12.0).unwrap();
        let r = verify_weak_poincare(&m, &WeakRate::Constant(0.0), &[1e-8], &[f.clone()]).unwrap();
        assert!(!r.pass);
        assert!(r.cases[0].margin < -0.1);
        let mc = verify_poincare(&m, 0.0, &[f], Some((100_000, &StreamFactory::new(8, "weak"))))
            .unwrap();
        let est = mc.cases[0].mc_lhs.unwrap();
        assert!(est.z_to(mc.cases[0].lhs) < 4.0);
        assert!(est.point > mc.cases[0].rhs + 4.0 * est.std_error);
    }

    #[test]
    fn counterexample_examples() {
        let mixing = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let params = PtiParams { c1: 0.5, c2: 10.0 };
        let r = pti_counterexample(&mixing, &[1e-4], params).unwrap();
        let case = &r.cases[0];
        assert!((case.lhs - (6e-8 + 2e-4)).abs() < 1e-18);
        assert!((case.rhs - (1e-4 + 4e-7)).abs() < 1e-18);
        assert!(case.ratio.unwrap() > 1.99 && !case.pass);
        let r = pti_counterexample(&mixing, &default_counterexample_weights(), params).unwrap();
        let summary = r.counterexample.unwrap();
        assert!(summary.monotone && summary.converged && r.pass);
        assert!(matches!(
            pti_counterexample(&mixing, &[0.1], PtiParams { c1: 1.0, c2: 1.0 }),
            Err(Error::HypothesisUnmet(_))
        ));
    }

    #[test]
    fn counterexample_closed_forms_match_box_sums() {
        let mixing = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let base = BaseSpace::new(vec![1.0]).unwrap();
        let check = pti_box_check(&mixing, &base, 0.1, &TruncationPolicy::default()).unwrap();
        assert!(check.max_abs_error < 1e-8, "{check:?}");
    }

    #[test]
    fn sharpness_examples() {
        let zero = sharpness_witness(&BaseSpace::new(vec![1.0, 2.0]).unwrap(), 1.0, &tf(&[0.0, 0.0])).unwrap();
        assert!(zero.exact_equality && zero.ratio.is_none() && zero.pass);
        let r = sharpness_witness(&BaseSpace::new(vec![2.0, 3.0]).unwrap(), 1.0, &tf(&[1.0, 1.0])).unwrap();
        assert!((r.variance - 5.0).abs() < 1e-10 && (r.energy - 5.0).abs() < 1e-10 && r.pass);
        let r = sharpness_witness(&BaseSpace::new(vec![1.0]).unwrap(), 0.5, &tf(&[2.0])).unwrap();
        assert!((r.variance - 2.0).abs() < 1e-10 && (r.energy - 2.0).abs() < 1e-10 && r.pass);
    }

    #[test]
    fn counterexample_ratio_decreases_when_c2_is_small() {
        // C₁m₂ > C₂m₁²: the ratio approaches 1/C₁ from above.
        let mixing = MixingMeasure::gamma(2.0, 1.0).unwrap();
        let r = pti_counterexample(&mixing, &default_counterexample_weights(), PtiParams { c1: 0.5, c2: 0.1 })
            .unwrap();
        let s = r.counterexample.unwrap();
        assert!(!s.monotone && s.converged && r.pass);
        assert!(r.cases.iter().all(|c| c.ratio.unwrap() > 2.0));
    }

    proptest! {
        #[test]
        fn counterexample_ratio_increases_toward_limit(
            shape in 0.5f64..5.0,
            rate in 0.2f64..5.0,
            c1 in 0.05f64..0.95,
            c2 in 0.0f64..200.0,
        ) {
            let mixing = MixingMeasure::gamma(shape, rate).unwrap();
            let (m1, m2) = (mixing.moment(1).unwrap(), mixing.moment(2).unwrap());
            prop_assume!(c2 * m1 * m1 >= c1 * m2);
            let weights: Vec<f64> = (0..12).map(|j| 10f64.powf(-0.5 * j as f64)).collect();
            let r = pti_counterexample(&mixing, &weights, PtiParams { c1, c2 }).unwrap();
            let s = r.counterexample.unwrap();
            prop_assert!(s.monotone);
            let last = r.cases.last().unwrap().ratio.unwrap();
            prop_assert!(last <= 1.0 / c1 + 1e-12);
        }
    }
}
