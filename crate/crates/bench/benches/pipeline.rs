use std::hint::black_box;

use covergen::alignment::dtw_path;
use covergen::dataset::{build_interleaved_pair, segment};
use covergen::features::{chroma_from_midi, chromagram, FRAME_RATE};
use covergen::model::{generate, GenerationConfig, Model, ModelConfig};
use covergen::remi::{encode, VocabConfig, Vocabulary};
use covergen::synth::{render_audio, synthetic_piece, warped_pair};
use criterion::{criterion_group, criterion_main, Criterion};

const SAMPLE_RATE: u32 = 16_000;

fn features(c: &mut Criterion) {
    let (perf, _) = synthetic_piece(1, 8);
    let pcm = render_audio(&perf, SAMPLE_RATE);
    c.bench_function("chromagram 8 bars", |b| b.iter(|| chromagram(black_box(&pcm), SAMPLE_RATE).unwrap()));

    let song = chromagram(&pcm, SAMPLE_RATE).unwrap();
    let piano = chroma_from_midi(&perf, FRAME_RATE).unwrap();
    c.bench_function("dtw 8 bars", |b| b.iter(|| dtw_path(black_box(&piano), black_box(&song)).unwrap()));
}

fn codec(c: &mut Criterion) {
    let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
    let (perf, grid) = synthetic_piece(2, 32);
    c.bench_function("encode 32 bars", |b| b.iter(|| encode(black_box(&perf), &grid, None, &vocab).unwrap()));
}

fn model(c: &mut Criterion) {
    let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
    let config = ModelConfig::toy(vocab.size(), 14);
    let model = Model::new(config.clone(), 3).unwrap();
    let (perf, grid) = synthetic_piece(3, 4);
    let pair = warped_pair(&perf, &grid, 1.05, &[]).unwrap();
    let seq = build_interleaved_pair("bench", &pair.weak_pair(&vocab).unwrap()).unwrap();
    let seg = segment(&seq, config.max_positions, &vocab).unwrap().remove(0);

    c.bench_function("toy forward", |b| b.iter(|| model.forward_segment(black_box(&seg)).unwrap()));
    c.bench_function("toy loss and grad", |b| b.iter(|| model.loss_and_grad(black_box(&seg), 1.0).unwrap()));
    let cfg = GenerationConfig::greedy(32);
    c.bench_function("toy generate 4 bars", |b| {
        b.iter(|| generate(&model, &vocab, black_box(&seq.blocks), &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = features, codec, model
}
criterion_main!(benches);
