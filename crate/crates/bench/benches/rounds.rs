use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedtier::distillation::distill_step;
use fedtier::orchestrator::{load_dataset, Simulation};
use fedtier::{ExperimentConfig, UpdatePacket};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simulation() -> Simulation {
    let mut c = ExperimentConfig::default();
    c.train.round_size = 32;
    c.run.workers = 1;
    let ds = load_dataset(&c).unwrap();
    let mut sim = Simulation::new(&c, ds).unwrap();
    sim.begin_epoch();
    sim
}

fn benches(c: &mut Criterion) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let sim = simulation();
    let mut probe = sim.clone();
    let ids = probe.select_clients();
    let packets: Vec<UpdatePacket> = pool
        .install(|| probe.train_clients(&ids))
        .unwrap()
        .into_iter()
        .map(|(_, o)| o.packet)
        .collect();

    c.bench_function("local_train_32_clients", |b| {
        b.iter_batched(
            || sim.clone(),
            |mut s| pool.install(|| s.train_clients(&ids).unwrap()),
            BatchSize::LargeInput,
        )
    });
    c.bench_function("aggregate_32_packets", |b| {
        b.iter_batched(
            || sim.clone(),
            |mut s| s.aggregate(&packets).unwrap(),
            BatchSize::LargeInput,
        )
    });
    c.bench_function("distill_step_k100", |b| {
        b.iter_batched(
            || (sim.params.clone(), ChaCha8Rng::seed_from_u64(0)),
            |(mut p, mut rng)| distill_step(&mut p, 100, 1, 0.001, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
    c.bench_function("evaluate_200_users", |b| {
        b.iter(|| pool.install(|| sim.evaluate().unwrap()))
    });
}

criterion_group!(rounds, benches);
criterion_main!(rounds);
