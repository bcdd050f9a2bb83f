use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lgdea_core::corpus::{generate_corpus, GenerationConfig, GroundTruthExtractor};
use lgdea_core::relation::propagate;
use lgdea_core::trainer::{
    make_batches, train_step, BatchView, EvidenceTable, Mode, TrainConfig, TrainState,
};
use lgdea_core::Matrix;

fn filled(rows: usize, cols: usize, salt: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let h = (i as u64 * 31 + j as u64 * 17 + salt).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

fn matmul(c: &mut Criterion) {
    let a = filled(128, 64, 1);
    let b = filled(64, 128, 2);
    c.bench_function("matmul 128x64 * 64x128", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn propagation(c: &mut Criterion) {
    let y = Matrix::from_fn(32, 32, |i, j| if i == j && i < 4 { 1.0 } else { 0.0 });
    let s_i = filled(32, 32, 3);
    let s_t = filled(32, 32, 4);
    c.bench_function("propagate 32x32, 2 steps", |bench| {
        bench.iter(|| propagate(black_box(&y), &s_i, &s_t, 2).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let corpus = generate_corpus(&GenerationConfig::small(), 0).unwrap();
    let evidence =
        EvidenceTable::extract(&corpus, &GroundTruthExtractor::new(&corpus.world)).unwrap();
    let batch = make_batches(&corpus, 32, 0.1, 0).unwrap().remove(0);
    let view = BatchView::new(&corpus, &evidence, &batch).unwrap();
    for mode in [Mode::Lgdea, Mode::GlobalBaseline] {
        let cfg = TrainConfig {
            mode,
            ..TrainConfig::small()
        };
        let view = if mode == Mode::Lgdea {
            view.clone()
        } else {
            view.paired_only()
        };
        let mut state = TrainState::new(&cfg, &corpus.world).unwrap();
        c.bench_function(&format!("train_step {mode}, batch 32"), |bench| {
            bench.iter(|| train_step(&mut state, &view, &cfg, 1e-4).unwrap())
        });
    }
}

criterion_group!(benches, matmul, propagation, training_step);
criterion_main!(benches);
