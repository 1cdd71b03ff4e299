use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vqa_core::data::{generate_dataset, load_dataset, GeneratorSpec};
use vqa_core::harness::eval::evaluate;
use vqa_core::harness::gradsuite::run_suite;
use vqa_core::harness::train::fit_config;
use vqa_core::model::Model;
use vqa_core::par::ExecMode;
use vqa_core::TrainConfig;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_evaluate(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        train: 32,
        val: 8,
        test: 128,
        ..GeneratorSpec::default()
    };
    generate_dataset(&spec, 1, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let cfg = fit_config(&TrainConfig::toy(), &data);
    let model = Model::new(&cfg.model, 0).unwrap();
    let mut group = c.benchmark_group("evaluate_128");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate(&model, &data.test.samples, &data.vocab, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_gradsuite(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("gradsuite_8_seeds");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| run_suite(&seeds, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_gradsuite);
criterion_main!(benches);
