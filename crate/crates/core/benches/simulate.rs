use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pbsnet::fusion::{compile, CompileOptions};
use pbsnet::quant::RangeMode;
use pbsnet::sim::{run_batch, run_batch_sequential, RunConfig};
use pbsnet::synth::{random_dense_graph, random_inputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = random_dense_graph(&mut rng, &[784, 192, 192, 10], 2, RangeMode::Narrow, false, 0.2);
    let inputs = random_inputs(&mut rng, &g.input, 256);
    let circuit = compile(&g, &inputs, &CompileOptions::default()).expect("compiles");
    let cfg = RunConfig { p_err: 1e-3, policy: pbsnet::eval::OutOfDomainPolicy::Clamp, ..Default::default() };

    let mut group = c.benchmark_group("fcnn_784_192_192_10_x256");
    group.sample_size(20);
    group.bench_function("run_batch", |b| b.iter(|| black_box(run_batch(&circuit, &inputs, &cfg))));
    group.bench_function("run_batch_sequential", |b| b.iter(|| black_box(run_batch_sequential(&circuit, &inputs, &cfg))));
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
