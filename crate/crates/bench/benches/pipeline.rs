use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use disentangle_bench::{random_matrix, ranking_case, synthetic, unit_rows};
use disentangle_core::diffmath::matmul;
use disentangle_core::evaluation::{average_precision, mean_average_precision};
use disentangle_core::losses::mfi_loss_with_grad;
use disentangle_core::projectors::init_projectors;
use disentangle_core::trainer::Trainer;
use disentangle_core::{GramAxis, TrainConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // text fc1 at 20 classes, a 7×7 grid through the image projector, square
    for (m, k, n) in [(40, 512, 384), (49, 512, 256), (256, 256, 256)] {
        let a = random_matrix(m, k, 1);
        let b = random_matrix(k, n, 2);
        group.throughput(Throughput::Elements((m * k * n) as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(a, b),
            |bench, (a, b)| bench.iter(|| matmul(black_box(a), black_box(b)).unwrap()),
        );
    }
    group.finish();
}

fn bench_mfi(c: &mut Criterion) {
    let mut group = c.benchmark_group("mfi_loss_with_grad");
    for (classes, d) in [(20, 256), (80, 256)] {
        let t = unit_rows(2 * classes, d, 3);
        for (label, axis, bn) in [
            ("classes", GramAxis::Classes, false),
            ("features", GramAxis::Features, false),
            ("features_bn", GramAxis::Features, true),
        ] {
            group.bench_with_input(BenchmarkId::new(label, classes), &t, |bench, t| {
                bench.iter(|| mfi_loss_with_grad(black_box(t), axis, bn, 0.2).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_average_precision(c: &mut Criterion) {
    let mut group = c.benchmark_group("average_precision");
    for n in [1_000, 10_000] {
        let (scores, labels) = ranking_case(n, 0.1, 4);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(
            BenchmarkId::new("single_class", n),
            &(scores, labels),
            |bench, (s, l)| bench.iter(|| average_precision(black_box(s), black_box(l)).unwrap()),
        );
    }
    // 5000 images × 80 classes, sample-major
    let (scores, labels): (Vec<_>, Vec<_>) =
        (0..5_000).map(|i| ranking_case(80, 0.05, 100 + i)).unzip();
    group.bench_function("map_80x5000", |bench| {
        bench.iter(|| mean_average_precision(black_box(&scores), black_box(&labels)).unwrap())
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let data = synthetic(256);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (hidden, d_prime) in [(96, 64), (384, 256)] {
        let config = TrainConfig {
            hidden,
            d_prime,
            lr0: 0.1,
            epochs: 1_000_000,
            ..TrainConfig::default()
        };
        let init = init_projectors(data.bank.dim(), hidden, d_prime, 0).unwrap();
        let mut trainer = Trainer::new(&data.train, &data.bank, &config, init).unwrap();
        group.bench_function(
            BenchmarkId::from_parameter(format!("batch32_{hidden}x{d_prime}")),
            |bench| bench.iter(|| trainer.step().unwrap()),
        );
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_mfi,
    bench_average_precision,
    bench_train_step
);
criterion_main!(benches);
