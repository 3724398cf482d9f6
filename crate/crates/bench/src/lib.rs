//! Fixtures shared by the benchmarks.

use madi_core::assembly::{prepare_all, Madi, ModelConfig, PreparedSample};
use madi_core::datagen::{generate_dataset, GenRanges, QaConfig, TaskKind};
use madi_core::diffcore::Tensor;
use madi_core::encoders::TextVocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sizes agree")
}

/// Default-width model and `n` prepared samples of the acceptance tasks.
pub fn model_and_data(n: usize) -> (Madi, Vec<PreparedSample>) {
    let cfg = ModelConfig { pn: 16, pv: 16, ..Default::default() };
    let ranges = GenRanges { length: (128, 256), ..Default::default() };
    let tasks = [TaskKind::TrendClass, TaskKind::PeriodValue];
    let samples = generate_dataset(n, 0, &tasks, &ranges, &QaConfig::default()).expect("valid ranges");
    let vocab = TextVocab::standard();
    let prepared = prepare_all(&samples, &vocab, &cfg).expect("samples fit the model");
    (Madi::new(cfg, vocab, 0).expect("valid config"), prepared)
}
