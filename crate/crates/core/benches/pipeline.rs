use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modsift_core::config::GlobalConfig;
use modsift_core::db::{build_library_signature, LibraryMeta, SignatureDatabase};
use modsift_core::detect::detect;
use modsift_core::features::{SignatureExtractor, StatisticalEmbedder};
use modsift_core::fixtures::{append_noise, library, LibraryParams};
use modsift_core::graph::ProgramGraph;
use modsift_core::metrics::MqNormalization;
use modsift_core::modularize::modularize;
use modsift_core::parallel::Execution;
use modsift_core::volume::propagate_volumes;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn config() -> GlobalConfig {
    let mut c = GlobalConfig::default();
    c.modularizer.locality_bias = false;
    c.modularizer.normalization = MqNormalization::Standard;
    c
}

fn synthetic(name: &str, modules: usize, seed: u64) -> ProgramGraph {
    let params = LibraryParams {
        name: name.into(),
        modules,
        ..Default::default()
    };
    library(&params, seed).unwrap().graph
}

fn stages(c: &mut Criterion) {
    let config = config();
    let graph = synthetic("big", 100, 1);
    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    group.bench_function("propagate", |b| {
        b.iter(|| propagate_volumes(&graph, &config.propagation))
    });
    let wg = propagate_volumes(&graph, &config.propagation);
    group.bench_function("modularize", |b| {
        b.iter(|| modularize(&wg, &config.modularizer))
    });
    let partition = modularize(&wg, &config.modularizer);
    let extractor =
        SignatureExtractor::new(&graph, &partition, &config.features, &StatisticalEmbedder)
            .unwrap();
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("sign", name), &exec, |b, &exec| {
            b.iter(|| extractor.extract_all(exec))
        });
    }
    group.finish();
}

fn detection(c: &mut Criterion) {
    let config = config();
    let mut db = SignatureDatabase::new();
    let mut first = None;
    for (i, name) in ["liba", "libb", "libc", "libd"].into_iter().enumerate() {
        let graph = synthetic(name, 16, 10 + i as u64);
        let meta = LibraryMeta {
            name: name.into(),
            ref_frequency: 10,
            ..Default::default()
        };
        db.add_library(
            build_library_signature(&graph, &meta, &config, Execution::Parallel).unwrap(),
        );
        first.get_or_insert(graph);
    }
    let mut program = first.unwrap();
    append_noise(&mut program, 200, 3);

    let mut group = c.benchmark_group("detect");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| detect(&program, &db, &config, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stages, detection);
criterion_main!(benches);
