use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stformer::backbone::ModelConfig;
use stformer::heads::{StrConfig, StrModel};
use stformer::scenario::{generate_dataset, ALL_TEMPLATES};
use stformer::train::{evaluate, PreparedSet};
use stformer::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(64, &ALL_TEMPLATES, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn raster_preparation(c: &mut Criterion) {
    let samples = generate_dataset(32, &ALL_TEMPLATES, 2, Execution::Parallel).unwrap();
    let mut g = c.benchmark_group("prepare_rasters_32");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| PreparedSet::new(samples.clone(), 64, exec).unwrap())
        });
    }
    g.finish();
}

fn batch_evaluation(c: &mut Criterion) {
    let samples = generate_dataset(16, &ALL_TEMPLATES, 3, Execution::Parallel).unwrap();
    let set = PreparedSet::new(samples, 64, Execution::Parallel).unwrap();
    let model = StrModel::new(StrConfig::new(ModelConfig::preset("300k").unwrap()), None, 0).unwrap();
    let mut g = c.benchmark_group("evaluate_300k_batch16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&model, &set, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, raster_preparation, batch_evaluation);
criterion_main!(benches);
