//! Sequential vs rayon execution of independent training jobs.
//!
//! Run with: cargo bench -p loramoe --bench parallel

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use loramoe::data::{prepare, split_subjects, synthetic_darwin};
use loramoe::experiments::{built_in, run_with};
use loramoe::numerics::derive_seed;
use loramoe::parallel::try_map;
use loramoe::training::{train, TrainConfig};
use loramoe::{Execution, Model, ModelConfig, ModelKind, Rng};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn training_jobs(c: &mut Criterion) {
    let data = synthetic_darwin(174, 89, 7).unwrap();
    let split = split_subjects(data.len(), 7).unwrap();
    let tt = prepare(&data, &split).unwrap();
    let train_cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };

    let mut group = c.benchmark_group("train_jobs");
    group.sample_size(10);
    for kind in [ModelKind::Mlp, ModelKind::LoraMoe] {
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, kind.short()), &kind, |b, &kind| {
                b.iter(|| {
                    try_map(exec, 16, |job| {
                        let seed = derive_seed(11, job as u64);
                        let cfg = ModelConfig {
                            n_experts: 6,
                            rank: 4,
                            ..ModelConfig::new(kind, tt.train.dim(), 64)
                        };
                        let model = Model::build(&cfg, &mut Rng::seed_from(seed))?;
                        let run = TrainConfig {
                            seed,
                            ..train_cfg.clone()
                        };
                        train(model, &tt.train.features, &tt.train.labels, &run).map(|o| o.losses.len())
                    })
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn sweep_experiment(c: &mut Criterion) {
    let data = synthetic_darwin(174, 89, 3).unwrap();
    let mut spec = built_in("rank_sweep").unwrap();
    spec.repetitions = 2;
    spec.train.epochs = 5;
    spec.sweep.truncate(4);
    spec.out.record_time = false;

    let mut group = c.benchmark_group("experiment");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(run_with(&spec, &data, exec).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, training_jobs, sweep_experiment);
criterion_main!(benches);
