use criterion::{criterion_group, criterion_main, Criterion};
use madi_bench::{model_and_data, random_tensor};
use madi_core::assembly::{train, AblationTag, PreparedSample, TrainConfig};
use madi_core::ddi::{CodebookHierarchy, DdiConfig};
use madi_core::diffcore::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn tape_matmul(c: &mut Criterion) {
    let a = random_tensor(128, 64, 0);
    let b = random_tensor(64, 64, 1);
    c.bench_function("tape matmul 128x64x64 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let y = t.matmul(va, vb).unwrap();
            let l = t.sum(y).unwrap();
            black_box(t.backward(l).unwrap());
        })
    });
}

fn rvq_quantize(c: &mut Criterion) {
    let cfg = DdiConfig::default();
    let mut h = CodebookHierarchy::new(&cfg).unwrap();
    let seeds = vec![random_tensor(256, cfg.d, 2)];
    h.init_from(&seeds, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x = random_tensor(16, cfg.d, 4);
    c.bench_function("rvq quantize 16 tokens", |bench| bench.iter(|| black_box(h.quantize(&x).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let (model, data) = model_and_data(8);
    let cfg = TrainConfig { steps: 1, batch: 8, eval_interval: 0, ..Default::default() };
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("full model step, batch 8", |bench| {
        bench.iter(|| {
            let mut m = model.clone();
            let data: &[PreparedSample] = &data;
            black_box(train(&mut m, AblationTag::Full, &cfg, data, None, &mut |_| {}).unwrap());
        })
    });
    g.bench_function("greedy answer", |bench| {
        bench.iter(|| black_box(model.answer(&data[0], AblationTag::Full.toggles(), 8).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, tape_matmul, rvq_quantize, train_step);
criterion_main!(benches);
