//! Experiment drivers behind `bdlab run`.

use super::config::{Experiment, ExperimentConfig, Resolved, SCHEMA};
use crate::base_space::TestFunction;
use crate::dirichlet::{mecke_test, scale_derivative, TestKernel};
use crate::error::{Error, Result};
use crate::inequality::{
    default_counterexample_weights, pti_box_check, pti_counterexample, verify_poincare,
    verify_weak_poincare, PtiParams, CONSTANT_SAFETY,
};
use crate::mixing::Con1Estimate;
use crate::poisson::{laplace_mixed, linear_moments, sample_counts, Configuration, TruncatedModel, TruncationPolicy};
use crate::rng::StreamFactory;
use crate::spectral::{build_generator, simulate, spectral_gap_with, stationarity_chi_square};
use crate::stats::{run_chunked, Accumulator, EstimateWithCI, Method};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::Path;
use std::time::Instant;

const EXACT_TOLERANCE: f64 = 1e-9;
const Z_LIMIT: f64 = 4.0;

/// The outcome of one experiment: a JSON payload and a verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub results: Value,
    pub pass: bool,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Runs the configured experiment and assembles the full report.
pub fn run(config: &ExperimentConfig, base_dir: &Path) -> Result<(Value, bool)> {
    let started = Instant::now();
    let resolved = config.resolve(base_dir)?;
    let outcome = execute(config, &resolved, base_dir)?;
    let report = json!({
        "schema": SCHEMA,
        "experiment": config.experiment.name(),
        "seed": config.seed,
        "inputs": to_value(config),
        "results": outcome.results,
        "pass": outcome.pass,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    Ok((report, outcome.pass))
}

pub fn execute(config: &ExperimentConfig, r: &Resolved, base_dir: &Path) -> Result<Outcome> {
    let streams = StreamFactory::new(config.seed, config.experiment.name());
    let n = config.mc_samples;
    let model = || TruncatedModel::build(r.space.clone(), r.mixing.clone(), &r.policy);
    match &config.experiment {
        Experiment::Mecke => {
            let m = model()?;
            let reports = TestKernel::battery(r.space.len())
                .iter()
                .enumerate()
                .map(|(j, h)| mecke_test(h, &m, Some((n, &streams.child(&j.to_string())))))
                .collect::<Result<Vec<_>>>()?;
            let pass = reports.iter().all(|x| x.pass);
            Ok(Outcome {
                results: json!({ "kernels": to_value(&reports) }),
                pass,
            })
        }
        Experiment::Laplace { functions } => {
            let m = model()?;
            let cases = functions
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    let f = TestFunction::new(f.clone())?;
                    laplace_check(&m, &f, n, &streams.child(&j.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let pass = cases.iter().all(|c| c.pass);
            Ok(Outcome {
                results: json!({ "cases": to_value(&cases) }),
                pass,
            })
        }
        Experiment::Rn { pairs, f } => {
            let f = TestFunction::new(f.clone())?;
            let cases = pairs
                .iter()
                .map(|(s, t)| rn_check(&r.space, *s, *t, &f, &r.policy))
                .collect::<Result<Vec<_>>>()?;
            let pass = cases.iter().all(|c| c.pass);
            Ok(Outcome {
                results: json!({ "cases": to_value(&cases) }),
                pass,
            })
        }
        Experiment::Derivative { s, h } => {
            let bounded: Vec<_> = r.battery.iter().filter(|f| f.sup_bound().is_some()).collect();
            if bounded.is_empty() {
                return Err(Error::InvalidArgument(
                    "the derivative experiment needs bounded battery members".into(),
                ));
            }
            let cases = bounded
                .iter()
                .map(|f| derivative_check(f, *s, &r.space, *h))
                .collect::<Result<Vec<_>>>()?;
            let pass = cases.iter().all(|c| c.pass);
            Ok(Outcome {
                results: json!({ "cases": to_value(&cases) }),
                pass,
            })
        }
        Experiment::Moments { f } => {
            let m = model()?;
            let f = TestFunction::new(f.clone())?;
            let check = moments_check(&m, &f, n, &streams)?;
            Ok(Outcome {
                pass: check.pass,
                results: to_value(&check),
            })
        }
        Experiment::Gap { solver, grid_nodes } => {
            let m = model()?;
            let gen = build_generator(&m)?;
            let gap = spectral_gap_with(&gen, *solver)?;
            let con1 = r.mixing.estimate_con1_constant(&r.mixing.default_grid(*grid_nodes))?;
            let budget = 1e-8 + gen.boundary_mass();
            let bound = match &con1 {
                Con1Estimate::Finite { value, .. } => {
                    Some(1.0 / (1.0 + r.space.total_mass() * value * CONSTANT_SAFETY))
                }
                Con1Estimate::Infinite { .. } => None,
            };
            let pass = gen.detailed_balance_residual() < 1e-10
                && bound.is_none_or(|b| gap.gap >= b - budget);
            Ok(Outcome {
                results: json!({
                    "generator": to_value(&gen.summary()),
                    "gap": to_value(&gap),
                    "con1": to_value(&con1),
                    "lower_bound": bound,
                    "budget": budget,
                }),
                pass,
            })
        }
        Experiment::Poincare {
            constant,
            grid_nodes,
        } => {
            let m = model()?;
            let (c, con1) = match constant {
                Some(c) => (*c, None),
                None => {
                    let est = r.mixing.estimate_con1_constant(&r.mixing.default_grid(*grid_nodes))?;
                    (est.value() * CONSTANT_SAFETY, Some(est))
                }
            };
            let report = verify_poincare(&m, c, &r.battery, Some((n, &streams)))?;
            Ok(Outcome {
                pass: report.pass,
                results: json!({ "con1": con1.as_ref().map(to_value), "report": to_value(&report) }),
            })
        }
        Experiment::WeakPoincare { alpha, r_grid } => {
            let m = model()?;
            let report = verify_weak_poincare(&m, &alpha.rate(), r_grid, &r.battery)?;
            Ok(Outcome {
                pass: report.pass,
                results: json!({ "report": to_value(&report) }),
            })
        }
        Experiment::Counterexample { c1, c2, weights } => {
            let weights = weights.clone().unwrap_or_else(default_counterexample_weights);
            let report = pti_counterexample(&r.mixing, &weights, PtiParams { c1: *c1, c2: *c2 })?;
            let check = pti_box_check(&r.mixing, &r.space, 0.1, &r.policy)?;
            let pass = report.pass && check.max_abs_error < 1e-8;
            Ok(Outcome {
                results: json!({ "report": to_value(&report), "box_check": to_value(&check) }),
                pass,
            })
        }
        Experiment::Simulate {
            t_end,
            start,
            f,
            trajectory_csv,
        } => {
            let m = model()?;
            let gen = build_generator(&m)?;
            let f = TestFunction::new(f.clone())?;
            let start = Configuration::new(start.clone().unwrap_or_else(|| vec![0; r.space.len()]));
            let traj = simulate(&gen, *t_end, &start, &mut streams.stream(0))?;
            if let Some(path) = trajectory_csv {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                traj.write_csv(std::fs::File::create(full)?)?;
            }
            let stationary = m.expect(|k| f.pair(k)) / m.box_mass();
            let average = traj.batch_means(&f, 50);
            let z = average.z_to(stationary);
            let chi = stationarity_chi_square(&gen, &traj, 5.0).ok();
            let pass = z < Z_LIMIT && chi.is_none_or(|c| c.p_value > 1e-4);
            Ok(Outcome {
                results: json!({
                    "jumps": traj.len() - 1,
                    "stationary_mean": stationary,
                    "time_average": to_value(&average),
                    "z": z,
                    "chi_square": chi.as_ref().map(to_value),
                }),
                pass,
            })
        }
        Experiment::DumpPmf { csv } => {
            let m = model()?;
            let full = if csv.is_absolute() { csv.clone() } else { base_dir.join(csv) };
            m.write_pmf_csv(std::fs::File::create(&full)?)?;
            Ok(Outcome {
                results: json!({
                    "csv": full.display().to_string(),
                    "states": m.state_count(),
                    "tail_mass": m.tail_mass(),
                }),
                pass: true,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LaplaceCase {
    pub f: Vec<f64>,
    pub closed_form: f64,
    pub exact: EstimateWithCI,
    pub mc: EstimateWithCI,
    pub abs_gap: f64,
    pub z: f64,
    pub pass: bool,
}

/// π(e^{γ(f)}) by box sum and by Monte Carlo against the closed form.
pub fn laplace_check(model: &TruncatedModel, f: &TestFunction, n: u64, streams: &StreamFactory) -> Result<LaplaceCase> {
    let closed_form = laplace_mixed(model.mixing(), model.space(), f)?;
    if !closed_form.is_finite() {
        return Err(Error::DivergentMoment {
            order: 0,
            reason: "the Laplace transform diverges for this f".into(),
        });
    }
    let g = |k: &[u32]| f.pair(k).exp();
    let exact = EstimateWithCI::exact(model.expect(g), model.truncation_budget(g)?);
    let (space, mixing) = (model.space(), model.mixing());
    let acc = run_chunked(n, streams, |rng, acc: &mut Accumulator| {
        let s = mixing.sample_scale(rng);
        acc.push(g(&sample_counts(s, space, rng)));
    });
    let mc = acc.estimate(Method::Mc);
    let abs_gap = (exact.point - closed_form).abs();
    let z = mc.z_to(closed_form);
    Ok(LaplaceCase {
        f: f.values().to_vec(),
        closed_form,
        exact,
        mc,
        abs_gap,
        z,
        pass: abs_gap <= EXACT_TOLERANCE * closed_form.abs().max(1.0) + exact.budget && z < Z_LIMIT,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RnCase {
    pub s: f64,
    pub t: f64,
    pub density_mean: f64,
    pub reweighted: [f64; 2],
    pub direct: [f64; 2],
    pub max_rel_gap: f64,
    pub pass: bool,
}

/// Moments of γ(f) at scale t, directly and by reweighting draws at scale s
/// with dπ_{tμ}/dπ_{sμ}; both sums run over a box certified for s and t.
pub fn rn_check(
    space: &crate::base_space::BaseSpace,
    s: f64,
    t: f64,
    f: &TestFunction,
    policy: &TruncationPolicy,
) -> Result<RnCase> {
    let target = TruncationPolicy::with_target(policy.tail_target.min(1e-14));
    let a = TruncatedModel::pure(space.clone(), s, &target)?;
    let b = TruncatedModel::pure(space.clone(), t, &target)?;
    let caps: Vec<u32> = a.count_box().caps().iter().zip(b.count_box().caps()).map(|(x, y)| *x.max(y)).collect();
    let shared = TruncationPolicy::with_caps(caps);
    let at_s = TruncatedModel::pure(space.clone(), s, &shared)?;
    let at_t = TruncatedModel::pure(space.clone(), t, &shared)?;
    let rho = |k: &[u32]| {
        crate::poisson::rn_density(s, t, space, &Configuration::new(k.to_vec())).unwrap_or(f64::NAN)
    };
    let [d, r1, r2] = at_s.box_sums(|k, p| {
        let w = p * rho(k);
        let v = f.pair(k);
        [w, w * v, w * v * v]
    });
    let [q1, q2] = at_t.box_sums(|k, p| {
        let v = f.pair(k);
        [p * v, p * v * v]
    });
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
    let max_rel_gap = rel(r1, q1).max(rel(r2, q2));
    Ok(RnCase {
        s,
        t,
        density_mean: d,
        reweighted: [r1, r2],
        direct: [q1, q2],
        max_rel_gap,
        pass: max_rel_gap < EXACT_TOLERANCE && (d - 1.0).abs() < 1e-10,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCase {
    pub functional: String,
    pub at_h: crate::dirichlet::ScaleDerivative,
    pub at_half_h: crate::dirichlet::ScaleDerivative,
    /// gap(h)/gap(h/2); absent when both gaps are at rounding level.
    pub ratio: Option<f64>,
    pub pass: bool,
}

pub fn derivative_check(
    f: &crate::functionals::Functional,
    s: f64,
    space: &crate::base_space::BaseSpace,
    h: f64,
) -> Result<DerivativeCase> {
    let at_h = scale_derivative(f, s, space, h)?;
    let at_half_h = scale_derivative(f, s, space, h / 2.0)?;
    let ratio = (at_h.gap > 1e-12).then(|| at_h.gap / at_half_h.gap);
    let pass = at_h.gap < 1e-6 && ratio.is_none_or(|q| (3.5..=4.5).contains(&q));
    Ok(DerivativeCase {
        functional: f.label().to_string(),
        at_h,
        at_half_h,
        ratio,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsCase {
    pub closed_form: [f64; 2],
    pub box_sum: [f64; 2],
    pub mc: [EstimateWithCI; 2],
    pub pass: bool,
}

/// First and second moments of γ(f): closed form, box sums and Monte Carlo.
pub fn moments_check(model: &TruncatedModel, f: &TestFunction, n: u64, streams: &StreamFactory) -> Result<MomentsCase> {
    let (first, second) = linear_moments(model.space(), f, model.mixing())?;
    let [b1, b2] = model.box_sums(|k, p| {
        let v = f.pair(k);
        [p * v, p * v * v]
    });
    let (space, mixing) = (model.space(), model.mixing());
    let acc = run_chunked(n, streams, |rng, acc: &mut [Accumulator; 2]| {
        let s = mixing.sample_scale(rng);
        let v = f.pair(&sample_counts(s, space, rng));
        acc[0].push(v);
        acc[1].push(v * v);
    });
    let mc = [acc[0].estimate(Method::Mc), acc[1].estimate(Method::Mc)];
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-8 * y.abs().max(1.0);
    let pass = close(b1, first) && close(b2, second) && mc[0].z_to(first) < Z_LIMIT && mc[1].z_to(second) < Z_LIMIT;
    Ok(MomentsCase {
        closed_form: [first, second],
        box_sum: [b1, b2],
        mc,
        pass,
    })
}
