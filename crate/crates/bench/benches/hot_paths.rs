use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pacmpdm::benchmark::Benchmark1d;
use pacmpdm::merging::{merging_model, CostWeights};
use pacmpdm::pac::initial_state;
use pacmpdm::pipeline::build_dataset;
use pacmpdm::sim::{demonstration_events, SimConfig};
use pacmpdm::{merging, OutputActivation, ZNetwork};

fn network(c: &mut Criterion) {
    let net = ZNetwork::new(&[4, 32, 32, 1], OutputActivation::ExpNegSoftplus, 0).unwrap();
    let x = [-12.0, 0.4, 6.0, -0.3];
    c.bench_function("network_forward", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("network_param_gradient", |b| b.iter(|| net.grad_params(black_box(&x)).unwrap()));
    c.bench_function("network_input_gradient", |b| b.iter(|| net.log_value_grad_input(black_box(&x)).unwrap()));
}

fn learner_step(c: &mut Criterion) {
    let cfg = SimConfig { train_episodes: 40, ..SimConfig::default() };
    let w = CostWeights::default();
    let data = build_dataset(&demonstration_events(&cfg, &w).unwrap(), &w).unwrap();
    let model = merging_model(cfg.dt, w).unwrap();
    let train = merging::train_config(0);
    let mut state = initial_state(&data.samples, &model, &train).unwrap();
    let batch: Vec<_> = data.samples.iter().take(train.batch_size).collect();
    c.bench_function("critic_update_batch", |b| b.iter(|| state.critic_update(black_box(&batch)).unwrap()));
    c.bench_function("actor_update_batch", |b| b.iter(|| state.actor_update(black_box(&batch)).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let bench = Benchmark1d::default();
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    group.bench_function("solve_201_cells", |b| b.iter(|| bench.solve().unwrap()));
    group.finish();
}

criterion_group!(benches, network, learner_step, oracle);
criterion_main!(benches);
