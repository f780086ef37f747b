//! The reversible birth-death generator on a truncation box: rates, spectral
//! gap, semigroup decay and exact simulation.
//!
//! Births at atom i occur at rate w_i·E[s | γ(X)], deaths at rate k_i. With
//! these rates π_{λ,μ} satisfies detailed balance and the quadratic form of
//! the generator is the Dirichlet energy. Births that would leave the box are
//! suppressed, which keeps the chain reversible for the box-restricted law.

use crate::base_space::TestFunction;
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::poisson::{total, Configuration, CountBox, TruncatedModel};
use crate::rng::Stream;
use crate::stats::{Accumulator, EstimateWithCI, Method};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::io::Write;

/// Largest state count solved by dense eigendecomposition.
pub const DENSE_LIMIT: usize = 2000;
const MAX_TAIL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    count_box: CountBox,
    weights: Vec<f64>,
    /// π restricted to the box and renormalized.
    pi: Vec<f64>,
    box_mass: f64,
    /// E[s | γ(X) = n] for n up to one past the largest total in the box.
    posterior: Vec<f64>,
    /// Up-edges (k, k + e_i) with symmetrized coupling √(b_i(k)·(k_i + 1)).
    edges: Vec<(usize, usize, f64)>,
    /// Total jump rate out of each state.
    diag: Vec<f64>,
    detailed_balance_residual: f64,
    boundary_mass: f64,
    boundary_flux: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorSummary {
    pub states: usize,
    pub edges: usize,
    pub detailed_balance_residual: f64,
    /// π-mass of states on the outer face of the box.
    pub boundary_mass: f64,
    /// Σ π(k) b_i(k) over suppressed births.
    pub boundary_flux: f64,
}

pub fn build_generator(model: &TruncatedModel) -> Result<GeneratorModel> {
    if model.tail_mass() >= MAX_TAIL {
        return Err(Error::InvalidArgument(format!(
            "generator needs a box with tail mass below {MAX_TAIL:e}, got {:e}",
            model.tail_mass()
        )));
    }
    let count_box = model.count_box().clone();
    let weights = model.space().weights().to_vec();
    let total_mass = model.space().total_mass();
    let max_total: u64 = count_box.caps().iter().map(|c| u64::from(*c)).sum();
    let posterior = (0..=max_total + 1)
        .map(|n| model.mixing().posterior_scale_mean(total_mass, n))
        .collect::<Result<Vec<_>>>()?;
    let box_mass = model.box_mass();
    let pi: Vec<f64> = model.pmf_table().iter().map(|p| p / box_mass).collect();
    let caps = count_box.caps().to_vec();
    let mut edges = Vec::with_capacity(count_box.len() * weights.len());
    let mut diag = vec![0.0; count_box.len()];
    let mut residual = 0.0f64;
    let (mut boundary_mass, mut boundary_flux) = (0.0, 0.0);
    count_box.for_each_in(0, count_box.len(), |idx, k| {
        let post = posterior[total(k) as usize];
        let mut on_face = false;
        for (i, w) in weights.iter().enumerate() {
            let birth = w * post;
            diag[idx] += f64::from(k[i]);
            if k[i] == caps[i] {
                on_face = true;
                boundary_flux += pi[idx] * birth;
                continue;
            }
            diag[idx] += birth;
            let up = idx + count_box.stride(i);
            let death = f64::from(k[i] + 1);
            let (lhs, rhs) = (pi[idx] * birth, pi[up] * death);
            let scale = lhs.abs().max(rhs.abs());
            if scale > 0.0 {
                residual = residual.max((lhs - rhs).abs() / scale);
            }
            edges.push((idx, up, (birth * death).sqrt()));
        }
        if on_face {
            boundary_mass += pi[idx];
        }
    });
    Ok(GeneratorModel {
        count_box,
        weights,
        pi,
        box_mass,
        posterior,
        edges,
        diag,
        detailed_balance_residual: residual,
        boundary_mass,
        boundary_flux,
    })
}

impl GeneratorModel {
    pub fn count_box(&self) -> &CountBox {
        &self.count_box
    }

    pub fn state_count(&self) -> usize {
        self.count_box.len()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    pub fn summary(&self) -> GeneratorSummary {
        GeneratorSummary {
            states: self.state_count(),
            edges: self.edges.len(),
            detailed_balance_residual: self.detailed_balance_residual,
            boundary_mass: self.boundary_mass,
            boundary_flux: self.boundary_flux,
        }
    }

    pub fn detailed_balance_residual(&self) -> f64 {
        self.detailed_balance_residual
    }

    pub fn boundary_mass(&self) -> f64 {
        self.boundary_mass
    }

    pub fn boundary_flux(&self) -> f64 {
        self.boundary_flux
    }

    /// Birth rate at atom i from state k, zero on the outer face.
    pub fn birth_rate(&self, k: &[u32], atom: usize) -> f64 {
        if k[atom] >= self.count_box.caps()[atom] {
            0.0
        } else {
            self.weights[atom] * self.posterior[total(k) as usize]
        }
    }

    pub fn death_rate(&self, k: &[u32], atom: usize) -> f64 {
        f64::from(k[atom])
    }

    /// Largest |Σ_j Q(k, j)| over states, the conservativity defect.
    pub fn row_sum_defect(&self) -> f64 {
        let mut out = self.diag.clone();
        let dims = self.weights.len();
        self.count_box.for_each_in(0, self.count_box.len(), |idx, k| {
            for i in 0..dims {
                out[idx] -= self.birth_rate(k, i) + self.death_rate(k, i);
            }
        });
        out.iter().fold(0.0f64, |a, b| a.max(b.abs()))
    }

    /// y = S x for the symmetrized negative generator S = D^{1/2}(−Q)D^{−1/2}.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, di), xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi = di * xi;
        }
        for &(a, b, c) in &self.edges {
            y[a] -= c * x[b];
            y[b] -= c * x[a];
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.state_count();
        let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.diag));
        for &(a, b, c) in &self.edges {
            m[(a, b)] -= c;
            m[(b, a)] -= c;
        }
        debug_assert_eq!(m.nrows(), n);
        m
    }

    fn ground(&self) -> Vec<f64> {
        self.pi.iter().map(|p| p.sqrt()).collect()
    }
}

/// Σ_k π(k) Σ_i w_i E[s | |k|] (F(k+e_i) − F(k))(G(k+e_i) − G(k)) over the
/// box, with births into the shell included.
pub fn form_of_generator(f: &Functional, g: &Functional, gen: &GeneratorModel) -> f64 {
    let mut terms = Vec::with_capacity(gen.state_count());
    let mut buf = Vec::with_capacity(gen.weights.len());
    gen.count_box.for_each_in(0, gen.count_box.len(), |idx, k| {
        let p = gen.pi[idx] * gen.box_mass;
        if p == 0.0 {
            terms.push(0.0);
            return;
        }
        let post = gen.posterior[total(k) as usize];
        let (f0, g0) = (f.eval_counts(k), g.eval_counts(k));
        buf.clear();
        buf.extend_from_slice(k);
        let mut acc = 0.0;
        for (i, w) in gen.weights.iter().enumerate() {
            buf[i] += 1;
            acc += w * post * (f.eval_counts(&buf) - f0) * (g.eval_counts(&buf) - g0);
            buf[i] -= 1;
        }
        terms.push(p * acc);
    });
    crate::par::pairwise_sum(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub solver: Solver,
    pub iterations: usize,
    /// Largest π-mass on the outer face; bounds the effect of reflection.
    pub boundary_mass: f64,
    pub states: usize,
}

pub fn spectral_gap(gen: &GeneratorModel) -> Result<GapEstimate> {
    spectral_gap_with(gen, Solver::Auto)
}

pub fn spectral_gap_with(gen: &GeneratorModel, solver: Solver) -> Result<GapEstimate> {
    let n = gen.state_count();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "a spectral gap needs at least two states".into(),
        ));
    }
    let solver = match solver {
        Solver::Auto if n <= DENSE_LIMIT => Solver::Dense,
        Solver::Auto => Solver::Iterative,
        s => s,
    };
    let (gap, iterations) = match solver {
        Solver::Dense => {
            if n > 4 * DENSE_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "dense eigensolve refused for {n} states; use the iterative solver"
                )));
            }
            let eig = SymmetricEigen::new(gen.dense());
            let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            values.sort_by(f64::total_cmp);
            (values[1], 0)
        }
        _ => rayleigh_minimize(gen, 1e-10, 20_000)?,
    };
    Ok(GapEstimate {
        gap,
        solver,
        iterations,
        boundary_mass: gen.boundary_mass,
        states: n,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Locally optimal preconditioned Rayleigh-quotient minimization over the
/// complement of √π. Stops once the relative change of the quotient stays
/// below `tol` for three consecutive steps.
fn rayleigh_minimize(gen: &GeneratorModel, tol: f64, max_iter: usize) -> Result<(f64, usize)> {
    let n = gen.state_count();
    let ground = gen.ground();
    let deflate = |v: &mut Vec<f64>| {
        for _ in 0..2 {
            let c = dot(v, &ground);
            axpy(-c, &ground, v);
        }
    };
    let precond: Vec<f64> = gen.diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
            (h as f64 / (1u64 << 53) as f64) - 0.5
        })
        .collect();
    deflate(&mut x);
    normalize(&mut x);
    let mut ax = vec![0.0; n];
    gen.apply(&x, &mut ax);
    let mut theta = dot(&x, &ax);
    let mut p: Option<Vec<f64>> = None;
    let mut calm = 0;
    let mut residual_norm = f64::INFINITY;
    for iter in 1..=max_iter {
        let r: Vec<f64> = ax.iter().zip(&x).map(|(a, b)| a - theta * b).collect();
        residual_norm = dot(&r, &r).sqrt();
        let mut w: Vec<f64> = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
        deflate(&mut w);
        let mut basis = vec![x.clone()];
        for mut v in std::iter::once(w).chain(p.clone()) {
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&v, b);
                    axpy(-c, b, &mut v);
                }
            }
            deflate(&mut v);
            if normalize(&mut v) > 1e-14 {
                basis.push(v);
            }
        }
        if basis.len() == 1 {
            return Ok((theta, iter));
        }
        let images: Vec<Vec<f64>> = basis
            .iter()
            .map(|b| {
                let mut y = vec![0.0; n];
                gen.apply(b, &mut y);
                y
            })
            .collect();
        let m = basis.len();
        let small = DMatrix::from_fn(m, m, |i, j| 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i])));
        let eig = SymmetricEigen::new(small);
        let (best, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let c = eig.eigenvectors.column(best);
        let mut x_new = vec![0.0; n];
        let mut ax_new = vec![0.0; n];
        let mut p_new = vec![0.0; n];
        for j in 0..m {
            axpy(c[j], &basis[j], &mut x_new);
            axpy(c[j], &images[j], &mut ax_new);
            if j > 0 {
                axpy(c[j], &basis[j], &mut p_new);
            }
        }
        let scale = normalize(&mut x_new);
        ax_new.iter_mut().for_each(|v| *v /= scale);
        let theta_new = dot(&x_new, &ax_new);
        let change = (theta_new - theta).abs() / theta_new.abs().max(f64::MIN_POSITIVE);
        theta = theta_new;
        x = x_new;
        ax = ax_new;
        p = Some(p_new);
        calm = if change < tol { calm + 1 } else { 0 };
        if calm >= 3 {
            return Ok((theta, iter));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        lower: (theta - residual_norm).max(0.0),
        upper: theta,
    })
}

/// A jump path of the birth-death chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dims: usize,
    times: Vec<f64>,
    states: Vec<u32>,
    t_end: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    pub fn state(&self, j: usize) -> &[u32] {
        &self.states[j * self.dims..(j + 1) * self.dims]
    }

    /// State at time t (right-continuous).
    pub fn state_at(&self, t: f64) -> &[u32] {
        let j = self.times.partition_point(|s| *s <= t).max(1) - 1;
        self.state(j)
    }

    /// (1/(b−a)) ∫_a^b g(γ_t) dt.
    fn window_average(&self, a: f64, b: f64, g: &impl Fn(&[u32]) -> f64) -> f64 {
        let start = self.times.partition_point(|s| *s <= a).max(1) - 1;
        let mut acc = 0.0;
        let mut j = start;
        while j < self.len() && self.times[j] < b {
            let lo = self.times[j].max(a);
            let hi = if j + 1 < self.len() { self.times[j + 1].min(b) } else { b };
            acc += (hi - lo) * g(self.state(j));
            j += 1;
        }
        acc / (b - a)
    }

    pub fn time_average(&self, f: &TestFunction) -> f64 {
        self.window_average(0.0, self.t_end, &|k| f.pair(k))
    }

    /// Time average of γ(f) with a batch-means standard error.
    pub fn batch_means(&self, f: &TestFunction, batches: usize) -> EstimateWithCI {
        let width = self.t_end / batches as f64;
        let mut acc = Accumulator::default();
        for b in 0..batches {
            let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
            acc.push(self.window_average(lo, hi, &|k| f.pair(k)));
        }
        acc.estimate(Method::Mc)
    }

    /// Writes `time,k_0,…,k_{n-1}` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..self.dims).map(|i| format!("k_{i}")));
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for j in 0..self.len() {
            let mut row = vec![format!("{:e}", self.times[j])];
            row.extend(self.state(j).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact event-driven simulation on [0, t_end] from γ₀.
pub fn simulate(gen: &GeneratorModel, t_end: f64, start: &Configuration, rng: &mut Stream) -> Result<Trajectory> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    let dims = gen.weights.len();
    if start.counts.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: start.counts.len(),
        });
    }
    if !gen.count_box.contains(&start.counts) {
        return Err(Error::InvalidArgument("initial configuration lies outside the box".into()));
    }
    let mut k = start.counts.clone();
    let mut traj = Trajectory {
        dims,
        times: vec![0.0],
        states: k.clone(),
        t_end,
    };
    let mut t = 0.0;
    let mut rates = vec![0.0; 2 * dims];
    loop {
        for i in 0..dims {
            rates[i] = gen.birth_rate(&k, i);
            rates[dims + i] = gen.death_rate(&k, i);
        }
        let total_rate: f64 = rates.iter().sum();
        if total_rate <= 0.0 {
            break;
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total_rate;
        if t >= t_end {
            break;
        }
        let mut pick = rng.random::<f64>() * total_rate;
        let mut event = rates.len() - 1;
        for (e, r) in rates.iter().enumerate() {
            if pick < *r {
                event = e;
                break;
            }
            pick -= r;
        }
        while rates[event] == 0.0 {
            event -= 1;
        }
        if event < dims {
            k[event] += 1;
        } else {
            k[event - dims] -= 1;
        }
        traj.times.push(t);
        traj.states.extend_from_slice(&k);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareReport {
    pub samples: usize,
    pub bins: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson test of states sampled every `spacing` time units against π,
/// pooling states whose expected count is below 5.
pub fn stationarity_chi_square(gen: &GeneratorModel, traj: &Trajectory, spacing: f64) -> Result<ChiSquareReport> {
    let samples = (traj.t_end() / spacing).floor() as usize;
    let mut observed = vec![0u64; gen.state_count()];
    for j in 1..=samples {
        let k = traj.state_at(j as f64 * spacing).to_vec();
        if j as f64 * spacing < traj.t_end() {
            observed[gen.count_box.index(&k)] += 1;
        }
    }
    let n: u64 = observed.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(&gen.pi) {
        let e = n as f64 * p;
        if e >= 5.0 {
            bins.push((*o as f64, e));
        } else {
            pool_o += *o as f64;
            pool_e += e;
        }
    }
    if pool_e > 0.0 {
        bins.push((pool_o, pool_e));
    }
    if bins.len() < 2 {
        return Err(Error::InvalidArgument("too few samples for a chi-square test".into()));
    }
    let statistic: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((bins.len() - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ChiSquareReport {
        samples: n as usize,
        bins: bins.len(),
        statistic,
        p_value: dist.sf(statistic),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub variances: Vec<f64>,
    pub t_grid: Vec<f64>,
}

/// Fits −d/dt log Var_π(P_t F) on `t_grid` by least squares, with P_t from
/// the eigendecomposition of the symmetrized generator.
pub fn decay_rate(gen: &GeneratorModel, f: &Functional, t_grid: &[f64]) -> Result<DecayFit> {
    let n = gen.state_count();
    if n > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "decay fit needs at most {DENSE_LIMIT} states, got {n}"
        )));
    }
    if t_grid.len() < 2 {
        return Err(Error::InvalidArgument("decay fit needs at least two times".into()));
    }
    let values: Vec<f64> = (0..n).map(|i| f.eval_counts(&gen.count_box.state(i))).collect();
    let mean: f64 = values.iter().zip(&gen.pi).map(|(v, p)| v * p).sum();
    let u: Vec<f64> = values.iter().zip(&gen.pi).map(|(v, p)| p.sqrt() * (v - mean)).collect();
    let var0 = dot(&u, &u);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if var0 <= 1e-24 * scale.max(1.0).powi(2) {
        return Err(Error::DegenerateFit(format!("`{}` has zero variance", f.label())));
    }
    let eig = SymmetricEigen::new(gen.dense());
    let kernel = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
        .expect("nonempty");
    let coeffs: Vec<(f64, f64)> = (0..n)
        .filter(|j| *j != kernel)
        .map(|j| {
            let c = eig.eigenvectors.column(j).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            (eig.eigenvalues[j], c * c)
        })
        .collect();
    let variances: Vec<f64> = t_grid
        .iter()
        .map(|t| coeffs.iter().map(|(l, c2)| c2 * (-2.0 * l * t).exp()).sum())
        .collect();
    if variances.iter().any(|v| *v <= 0.0) {
        return Err(Error::DegenerateFit("variance underflows on the time grid".into()));
    }
    let logs: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let tm = t_grid.iter().sum::<f64>() / t_grid.len() as f64;
    let lm = logs.iter().sum::<f64>() / logs.len() as f64;
    let sxy: f64 = t_grid.iter().zip(&logs).map(|(t, l)| (t - tm) * (l - lm)).sum();
    let sxx: f64 = t_grid.iter().map(|t| (t - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("time grid has no spread".into()));
    }
    Ok(DecayFit {
        rate: -sxy / sxx,
        variances,
        t_grid: t_grid.to_vec(),
    })
}
