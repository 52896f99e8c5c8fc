use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stormlab::assessment::Assessor;
use stormlab::backends::DEFAULT_RATING_TEMPLATE;
use stormlab::config::TrainConfig;
use stormlab::toy::{desk_config, desk_experts, desk_registry, ToyFixture, ToySpec};
use stormlab::trainer::Trainer;
use stormlab::{Exec, Image};

fn fixture() -> ToyFixture {
    ToyFixture::generate(&ToySpec {
        n_labeled: 16,
        n_unlabeled: 16,
        n_heldout: 0,
        refs_per_class: 4,
        size: 64,
        seed: 0,
    })
    .expect("fixture")
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn ensemble(c: &mut Criterion) {
    let f = fixture();
    let experts = desk_experts(&f.ground_truth);
    let mut group = c.benchmark_group("ensemble_assess");
    for (name, exec) in MODES {
        let assessor = Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| assessor.ensemble(f.unlabeled.items(), &experts).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let f = fixture();
    let model = stormlab::model::RestorationModel::init(&mut stormlab::rng::seeded_rng(0));
    let inputs: Vec<&Image> = f.unlabeled.items().iter().map(|s| &s.pixels).collect();
    let mut group = c.benchmark_group("forward_batch");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.forward_batch(&inputs, exec).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let f = fixture();
    let config = TrainConfig {
        iterations_per_round: 1_000_000,
        ..desk_config()
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, exec) in MODES {
        let trainer = Trainer::new(config.clone(), f.datasets(), desk_registry(&f, 0).unwrap())
            .unwrap()
            .with_exec(exec);
        let mut state = trainer.init_state().unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.train_step(&mut state).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, ensemble, forward, train_step);
criterion_main!(benches);
