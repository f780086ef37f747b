//! Parallel against sequential execution of the main estimators.
//!
//! With default features each workload runs on the global rayon pool and on
//! a one-thread pool. Built with `--no-default-features` the same workloads
//! run through the sequential fallback.

use bdlab::dirichlet::{energy_exact, energy_mc};
use bdlab::functionals::Functional;
use bdlab::poisson::{TruncatedModel, TruncationPolicy};
use bdlab::rng::StreamFactory;
use bdlab::{BaseSpace, MixingMeasure, TestFunction};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn model() -> TruncatedModel {
    let space = BaseSpace::new(vec![0.5, 1.0, 1.5]).unwrap();
    TruncatedModel::build(space, MixingMeasure::gamma(2.0, 3.0).unwrap(), &TruncationPolicy::default()).unwrap()
}

fn workloads() -> Vec<(&'static str, Box<dyn Fn() + Send + Sync>)> {
    let m = model();
    let f = Functional::exp_neg(TestFunction::new(vec![0.3, 1.0, 0.6]).unwrap()).unwrap();
    let streams = StreamFactory::new(1, "bench");
    let m2 = m.clone();
    let f2 = f.clone();
    vec![
        ("box_sum", Box::new(move || {
            black_box(m.box_sum(|k, p| p * (k[0] as f64 + 0.5 * k[1] as f64).cos()));
        })),
        ("energy_exact", Box::new(move || {
            black_box(energy_exact(&f, &m2).unwrap());
        })),
        ("energy_mc_1e5", Box::new(move || {
            black_box(energy_mc(&f2, &model(), 100_000, &streams).unwrap());
        })),
    ]
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for (name, work) in workloads() {
        let mut g = c.benchmark_group(name);
        g.sample_size(20);
        g.bench_function("parallel", |b| b.iter(&work));
        g.bench_function("one_thread", |b| b.iter(|| single.install(&work)));
        g.finish();
    }
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    for (name, work) in workloads() {
        let mut g = c.benchmark_group(name);
        g.sample_size(20);
        g.bench_function("sequential", |b| b.iter(&work));
        g.finish();
    }
}

criterion_group!(benches, bench);
criterion_main!(benches);
