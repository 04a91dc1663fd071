//! Sequential versus parallel execution of the data-parallel workloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use popflow::em::{near_identity_emission, squared_distance_cost};
use popflow::sbp::solve_many;
use popflow::sim::{simulate, SimConfig};
use popflow::{build_hmm_tree, DenseVector, Epsilon, Exec, ObservationSet, SbpConfig, StateSpace, TreeModel};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_simulate(c: &mut Criterion) {
    let config = SimConfig {
        grid_w: 20,
        n_particles: 20_000,
        steps: 8,
        ..SimConfig::default()
    };
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| simulate(&config, exec).unwrap()));
    }
    group.finish();
}

/// Small HMM trees whose marginals drift with `shift`.
fn batch(count: usize) -> Vec<TreeModel> {
    let space = StateSpace::grid(8);
    let s = space.size();
    let e = Epsilon::new(1.0).unwrap();
    let cost = squared_distance_cost(&space, 1.0, 50.0);
    (0..count)
        .map(|k| {
            let shift = k as f64 * 0.1;
            let steps = (0..6)
                .map(|t| {
                    let v = (0..s).map(|i| 1.5 + ((i as f64 + shift) * 0.37 + t as f64 * 0.2).sin()).collect();
                    DenseVector::new(v).unwrap()
                })
                .collect();
            let obs = ObservationSet::single(s, steps).unwrap();
            build_hmm_tree(&obs, &near_identity_emission(s, e), &vec![cost.clone(); 5]).unwrap().0
        })
        .collect()
}

fn bench_solve_many(c: &mut Criterion) {
    let models = batch(16);
    let config = SbpConfig {
        tol: 1e-8,
        ..SbpConfig::new(Epsilon::new(1.0).unwrap())
    };
    let mut group = c.benchmark_group("solve_many");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| solve_many(&models, &config, exec)));
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_solve_many);
criterion_main!(benches);
