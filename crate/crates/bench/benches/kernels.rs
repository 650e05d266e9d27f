use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use notegate::nn::{ArchConfig, ErrorDetector, Tensor};
use notegate::{cqt, rasterize, FrequencyGrid, NoteEvent, NoteTrack, TimeGrid, Waveform};

fn tone(sec: f64, hz: f64, sr: u32) -> Waveform {
    let n = (sec * sr as f64) as usize;
    let samples = (0..n).map(|i| (0.5 * (std::f64::consts::TAU * hz * i as f64 / sr as f64).sin()) as f32).collect();
    Waveform::new(samples, sr)
}

fn bench_rasterize(c: &mut Criterion) {
    let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
    let notes = (0..200).map(|k| NoteEvent::new(k as f64 * 0.3, k as f64 * 0.3 + 0.25, 110.0 * (1.0 + (k % 12) as f64 / 12.0)).unwrap()).collect();
    let track = NoteTrack::new("bench", notes);
    let n_frames = tg.frames_for_samples((61.0 * tg.sample_rate as f64) as usize);
    c.bench_function("rasterize_200_notes", |b| b.iter(|| rasterize(black_box(&track), &tg, &fg, n_frames).unwrap()));
}

fn bench_cqt(c: &mut Criterion) {
    let (tg, fg) = (TimeGrid::default(), FrequencyGrid::default());
    let w = tone(3.0, 220.0, tg.sample_rate);
    let mut g = c.benchmark_group("cqt");
    g.sample_size(10);
    g.bench_function("cqt_3s", |b| b.iter(|| cqt(black_box(&w), &fg, &tg).unwrap()));
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let arch = ArchConfig::default();
    let model = ErrorDetector::<f32>::new(arch.clone(), 0).unwrap();
    let batch = 8;
    let mut dims = vec![batch];
    dims.extend(arch.input_dims());
    let x = Tensor::new(dims, vec![0.25f32; batch * arch.input_len()]).unwrap();
    let mut g = c.benchmark_group("detector");
    g.sample_size(10);
    g.bench_function("predict_batch_8", |b| b.iter(|| model.predict(black_box(x.clone())).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_rasterize, bench_cqt, bench_forward);
criterion_main!(benches);
