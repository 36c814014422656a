use std::hint::black_box;

use clicktrack_bench::scene;
use clicktrack_core::tracker::{track_sequence, tracker_init, TrackerConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn tracking(c: &mut Criterion) {
    let s = scene(20);
    let b0 = s.objects[0].boxes[0];
    let cfg = TrackerConfig::default();
    c.bench_function("tracker_init", |b| b.iter(|| tracker_init(&s.frames[0], black_box(&b0), &cfg).unwrap()));
    let state = tracker_init(&s.frames[0], &b0, &cfg).unwrap();
    c.bench_function("tracker_step", |b| {
        b.iter_batched(|| state.clone(), |mut t| t.step(black_box(&s.frames[1])), criterion::BatchSize::SmallInput)
    });
    let mut group = c.benchmark_group("sequence");
    group.sample_size(10);
    group.bench_function("track_20_frames", |b| b.iter(|| track_sequence(&s.frames, black_box(&b0), &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, tracking);
criterion_main!(benches);
