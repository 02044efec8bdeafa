//! Sequential against parallel execution of the data-parallel kernels.
//!
//! Without the `parallel` feature both modes run sequentially, which makes
//! the overhead of the mode switch itself visible.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use markov_renewal::apps::{lindley_tail, LindleyOptions};
use markov_renewal::family::Family;
use markov_renewal::kernel::{kernel_power, stationary_drift, SemiMarkovKernel};
use markov_renewal::perron::{perron_pair, QSMatrix, DEFAULT_TOL};
use markov_renewal::renewal::{renewal_measure, RenewalOptions};
use markov_renewal::simulate::{empirical_renewal, EmpiricalOptions, Walker};
use markov_renewal::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn four_state(step: f64) -> SemiMarkovKernel {
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.1 } else { 0.3 }).collect()).collect();
    let fams: Vec<Option<Family>> = (0..16)
        .map(|k| {
            Some(match k % 3 {
                0 => Family::Exp { rate: 1.0 + (k % 4) as f64 * 0.5 },
                1 => Family::Normal { mean: 0.5, sd: 1.0 },
                _ => Family::Uniform { a: -0.5, b: 1.5 },
            })
        })
        .collect();
    SemiMarkovKernel::from_families(QSMatrix::from_rows(&rows).unwrap(), &fams, step).unwrap()
}

fn renewal(c: &mut Criterion) {
    let k = four_state(0.01);
    let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
    let st = stationary_drift(&k, &pd).unwrap();
    let mut g = c.benchmark_group("renewal_measure");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = RenewalOptions { exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| renewal_measure(&k, &pd, &st, black_box((-10.0, 40.0)), &opts).unwrap()));
    }
    g.finish();
}

fn power(c: &mut Criterion) {
    let k = four_state(0.01);
    let mut g = c.benchmark_group("kernel_power_8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| kernel_power(&k, black_box(8), exec).unwrap()));
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let k = four_state(0.05);
    let w = Walker::new(&k).unwrap();
    let mut g = c.benchmark_group("empirical_renewal");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = EmpiricalOptions { replicates: 2_000, master_seed: 1, exit_margin: 5.0, max_steps: 100_000, exec };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| empirical_renewal(&w, 0, black_box((0.0, 20.0)), 0.05, &opts)));
    }
    g.finish();

    let mm1 = Family::Mix(vec![(1.0 / 3.0, Family::Exp { rate: 2.0 }), (2.0 / 3.0, Family::Neg(Box::new(Family::Exp { rate: 1.0 })))]);
    let queue = SemiMarkovKernel::from_families(QSMatrix::from_rows(&[vec![1.0]]).unwrap(), &[Some(mm1)], 0.01).unwrap();
    let mut g = c.benchmark_group("lindley_tail");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = LindleyOptions { n_paths: 20_000, exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| lindley_tail(&queue, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, renewal, power, monte_carlo);
criterion_main!(benches);
