use std::hint::black_box;

use cadmus_bench::programs;
use cadmus_core::enumerate::{build_grid, default_alphabet, enum_value_programs, GridSpec};
use cadmus_core::templates::{sample, random_true_program, TemplateKind, TemplateSpec};
use cadmus_core::vm::{execute, VmConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn vm(c: &mut Criterion) {
    let config = VmConfig::default();
    let mut group = c.benchmark_group("execute");
    for kind in [TemplateKind::Equality, TemplateKind::Subroutines, TemplateKind::Random] {
        let batch = programs(kind, 256);
        group.throughput(Throughput::Elements(batch.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(kind.name()), &batch, |b, batch| {
            b.iter(|| {
                for p in batch {
                    black_box(execute(p, &config));
                }
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample");
    for kind in TemplateKind::ALL {
        let spec = TemplateSpec::new(kind, 3);
        let mut i = 0;
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                i += 1;
                black_box(sample(&spec, i).unwrap())
            })
        });
    }
    group.bench_function("random-length-5", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            black_box(random_true_program(3, i, 5).unwrap())
        })
    });
    group.finish();
}

fn enumeration(c: &mut Criterion) {
    let alphabet = default_alphabet();
    let mut group = c.benchmark_group("enumerate");
    group.sample_size(10);
    for length in [3, 4, 5] {
        group.bench_with_input(BenchmarkId::from_parameter(length), &length, |b, &n| {
            b.iter(|| enum_value_programs(n, &alphabet).unwrap())
        });
    }
    let set = enum_value_programs(5, &alphabet).unwrap();
    group.bench_function("grid-20-k10", |b| {
        b.iter(|| build_grid(&GridSpec::square(20, 10, 1), &set).unwrap())
    });
    group.finish();
}

criterion_group!(benches, vm, sampling, enumeration);
criterion_main!(benches);
