use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snds_core::dataio::{generate_synthetic, SyntheticShape};
use snds_core::objective::{loss_and_gradients, LossConfig, WindowBatch};
use snds_core::simeval::{dtw_metric, rollout_many};
use snds_core::trainer::sample_states;
use snds_core::{ModelConfig, RolloutConfig};

fn bench_training_step(c: &mut Criterion) {
    let ds = generate_synthetic(SyntheticShape::Sine, 1, 300, 0.0, 0).unwrap();
    let model = ModelConfig::default().build(&ds.target, 0).unwrap();
    let windows = ds.windows(2);
    let batch = WindowBatch::from_windows(&ds, &windows[..128], 2).unwrap();
    let cfg = LossConfig::new(ds.dt());
    c.bench_function("loss_and_gradients/128 windows", |b| {
        b.iter(|| loss_and_gradients(&model, &batch, &cfg).unwrap())
    });
}

fn bench_rollouts(c: &mut Criterion) {
    let ds = generate_synthetic(SyntheticShape::Sine, 1, 300, 0.0, 0).unwrap();
    let model = ModelConfig::default().build(&ds.target, 0).unwrap();
    let x0s = sample_states(&ds.bounds().scaled_box(3.0), 100, &mut ChaCha8Rng::seed_from_u64(1));
    let cfg = RolloutConfig { max_steps: 50, conv_radius: 0.0, ..RolloutConfig::for_dataset(&ds) };
    c.bench_function("rollout_many/100 states x 50 steps", |b| {
        b.iter(|| rollout_many(&model, &x0s, &cfg).unwrap())
    });
}

fn bench_dtw(c: &mut Criterion) {
    let ds = generate_synthetic(SyntheticShape::Sine, 2, 300, 0.01, 0).unwrap();
    let seq = |d: usize| -> Vec<Vec<f64>> { (0..ds.demos[d].len()).map(|s| ds.demos[d].state(s)).collect() };
    let (a, b) = (seq(0), seq(1));
    c.bench_function("dtw_metric/300x300", |bch| bch.iter(|| dtw_metric(&a, &b, 2.0).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_training_step, bench_rollouts, bench_dtw
}
criterion_main!(benches);
