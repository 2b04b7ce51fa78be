use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wsseg::cli::config::ExperimentConfig;
use wsseg::cli::experiment::{compare, Dataset};
use wsseg::eval::evaluate;
use wsseg::exec::Exec;
use wsseg::nets::{NetConfig, UNetLite};
use wsseg::synthdata::{gen_samples, ShapeSpec};
use wsseg::trainer::Variant;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_gen(c: &mut Criterion) {
    let spec = ShapeSpec::default();
    let mut group = c.benchmark_group("gen_samples_64");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| gen_samples(&spec, 0..64, 1, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let samples = gen_samples(&ShapeSpec::default(), 0..16, 2, Exec::Sequential).unwrap();
    let net = UNetLite::new(NetConfig { image_side: 64, ..NetConfig::default() }).unwrap();
    let mut group = c.benchmark_group("evaluate_16");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&net, &samples, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_compare(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.data.shape.side = 16;
    cfg.data.shape.radius = (3.0, 5.0);
    cfg.data.shape.halo_width = 1.0;
    cfg.data.train_count = 4;
    cfg.data.test_count = 2;
    cfg.data.annotation_ratio = 0.05;
    cfg.net.unet_depth = 2;
    cfg.net.base_channels = 4;
    cfg.net.disc_layers = 2;
    cfg.train.epochs = 2;
    let data = Dataset::generate(&cfg.data, 3, Exec::Sequential).unwrap();
    let variants = [Variant::PartialCe, Variant::Sccl, Variant::AcclUnpaired];
    let mut group = c.benchmark_group("compare_3x2");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| compare(&cfg, &data, &variants, &[1, 2], exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gen, bench_eval, bench_compare);
criterion_main!(benches);
