//! Sequential vs parallel execution of the data-parallel loops.
//!
//! Build with `--no-default-features` to see the fallback: both variants
//! then run sequentially.

use std::hint::black_box;
use std::path::Path;

use aqtc::embedding::{ButtonEncodingMode, SyntheticBackend};
use aqtc::evaluation::{self, evaluate, monte_carlo_random, EvalMode};
use aqtc::experiment::bundle_generated;
use aqtc::model::{InputDims, ModelConfig, Q2AModel};
use aqtc::synth::{generate_in_memory, GeneratorConfig};
use aqtc::{par, Execution};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn corpus_config() -> GeneratorConfig {
    GeneratorConfig {
        tasks: 24,
        ..Default::default()
    }
}

fn monte_carlo(c: &mut Criterion) {
    let counts = vec![6; 1200];
    let mut g = c.benchmark_group("monte_carlo_10k");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| monte_carlo_random(black_box(&counts), 10_000, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn generation_and_bundling(c: &mut Criterion) {
    let cfg = corpus_config();
    let backend = SyntheticBackend::default();
    let generated = generate_in_memory(&cfg, Path::new(""), Execution::Sequential).unwrap();
    let mut g = c.benchmark_group("per_task");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("generate", name), |b| {
            b.iter(|| generate_in_memory(black_box(&cfg), Path::new(""), exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("bundle", name), |b| {
            b.iter(|| {
                bundle_generated(
                    black_box(&generated),
                    &backend,
                    ButtonEncodingMode::Reverse,
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn model_loops(c: &mut Criterion) {
    let generated =
        generate_in_memory(&corpus_config(), Path::new(""), Execution::Parallel).unwrap();
    let bundles = bundle_generated(
        &generated,
        &SyntheticBackend::default(),
        ButtonEncodingMode::Reverse,
        Execution::Parallel,
    )
    .unwrap();
    let tasks: Vec<_> = generated.into_iter().map(|g| g.task).collect();
    let labels = evaluation::labels_of(&tasks);
    let model = Q2AModel::new(ModelConfig::default(), InputDims::of(&bundles[0]), 0).unwrap();
    let batch: Vec<(usize, usize)> = bundles
        .iter()
        .enumerate()
        .flat_map(|(b, x)| (0..x.qas.len()).map(move |q| (b, q)))
        .take(16)
        .collect();

    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("eval_free_running", name), |b| {
            b.iter(|| {
                evaluate(
                    &model,
                    black_box(&bundles),
                    &labels,
                    EvalMode::FreeRunning,
                    exec,
                )
                .unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("per_qa_gradients_batch16", name), |b| {
            b.iter(|| {
                par::map(exec, &batch, |&(bi, qi)| {
                    let qa = &bundles[bi].qas[qi];
                    model
                        .loss_and_grad(&bundles[bi], qa, &labels[&qa.qa_id])
                        .unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, monte_carlo, generation_and_bundling, model_loops);
criterion_main!(benches);
