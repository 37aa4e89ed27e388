use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use moral_core::envs::{bandit_of, Problem, Variant};
use moral_core::oracle::{boundary_oracle, OracleMethod};
use moral_core::sweep::{default_axes, run_sweep, GridMeta};
use moral_core::variance_voting::{Bootstrap, SarsaConfig, SarsaTrainer, VOTE_EPSILON};
use moral_core::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn oracle_sweep(c: &mut Criterion) {
    let bandit = bandit_of(Variant::single(Problem::Double));
    let theories = Problem::Double.table().select(&["util", "deont"]).unwrap();
    let mut g = c.benchmark_group("oracle_sweep_16x16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let (cs, xs) = default_axes(16, 16);
                let method = OracleMethod::Variance {
                    bootstrap: Bootstrap::Sarsa,
                    eps: VOTE_EPSILON,
                };
                boundary_oracle(&bandit, &theories, cs, xs, method, GridMeta::default(), exec).unwrap()
            })
        });
    }
    g.finish();
}

fn sarsa_training(c: &mut Criterion) {
    let bandit = bandit_of(Variant::single(Problem::Classic));
    let theories = Problem::Classic.table().select(&["util", "deont"]).unwrap();
    let mut g = c.benchmark_group("variance_sarsa_5k_steps");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let config = SarsaConfig {
                    total_steps: 5_000,
                    seed: 3,
                    ..Default::default()
                };
                let mut t = SarsaTrainer::new(&bandit, theories.clone(), config, exec).unwrap();
                t.train_until(u64::MAX, |_| {}).unwrap();
                t.step()
            })
        });
    }
    g.finish();
}

fn learned_sweep(c: &mut Criterion) {
    let bandit = bandit_of(Variant::single(Problem::Classic));
    let theories = Problem::Classic.table().select(&["util", "deont"]).unwrap();
    let config = SarsaConfig {
        total_steps: 2_000,
        seed: 3,
        ..Default::default()
    };
    let mut t = SarsaTrainer::new(&bandit, theories.clone(), config, Execution::Sequential).unwrap();
    t.train_until(u64::MAX, |_| {}).unwrap();
    let agent = t.agent();
    let mut g = c.benchmark_group("learned_sweep_60x60");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let (cs, xs) = default_axes(60, 60);
                run_sweep(&bandit, &agent, &theories, cs, xs, GridMeta::default(), exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, oracle_sweep, sarsa_training, learned_sweep);
criterion_main!(benches);
