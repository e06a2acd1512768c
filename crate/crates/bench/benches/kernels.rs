// cargo bench -p stm-bench
// cargo bench -p stm-bench -- read

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stm_bench::{
    frame, random_tensor, read_fast, read_inputs, space_time_read, InferenceConfig, LabelMap, MemoryPolicy, ModelConfig, StmModel, VideoSession,
};

fn read(c: &mut Criterion) {
    let config = ModelConfig::default();
    let mut group = c.benchmark_group("read");
    for t in [1usize, 4, 16] {
        let x = read_inputs(&config, t, 8, 8);
        group.bench_with_input(BenchmarkId::new("fast", t), &x, |b, x| {
            b.iter(|| read_fast(&x.kq, &x.vq, &x.km, &x.vm, false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fast_deterministic", t), &x, |b, x| {
            b.iter(|| read_fast(&x.kq, &x.vq, &x.km, &x.vm, true).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("reference", t), &x, |b, x| {
            b.iter(|| space_time_read(&x.kq, &x.vq, &x.km, &x.vm).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (cin, cout, hw) in [(16usize, 16usize, 32usize), (32, 32, 16), (64, 64, 8)] {
        let x = random_tensor(&[cin, hw, hw], 5);
        let w = random_tensor(&[cout, cin, 3, 3], 6);
        let bias = random_tensor(&[cout], 7);
        group.bench_function(format!("{cin}x{hw}x{hw}->{cout}"), |b| {
            b.iter(|| x.conv2d(&w, Some(&bias), 1, 1).unwrap())
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let model = StmModel::init(ModelConfig::default(), 1).unwrap();
    let (h, w) = (64, 64);
    let first = frame(h, w, 0.0);
    let labels = LabelMap::new(h, w, (0..h * w).map(|p| u8::from((20..40).contains(&(p / w)) && (20..40).contains(&(p % w)))).collect()).unwrap();
    let frames: Vec<_> = (1..=10).map(|i| frame(h, w, 0.1 * i as f32)).collect();
    let mut group = c.benchmark_group("step");
    group.sample_size(10);
    for policy in [MemoryPolicy::First, MemoryPolicy::FirstAndPrevious, MemoryPolicy::Interval(5)] {
        group.bench_function(policy.label(), |b| {
            b.iter(|| {
                let config = InferenceConfig {
                    policy,
                    ..Default::default()
                };
                let mut session = VideoSession::from_labels(&model, &first, &labels, config).unwrap();
                for f in &frames {
                    session.step(f).unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, read, conv, step);
criterion_main!(benches);
