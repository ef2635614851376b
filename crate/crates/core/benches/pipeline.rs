// SPDX-License-Identifier: Apache-2.0

//! Sequential vs rayon on the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use easa_core::embedding::{init_codebook, PositionTable};
use easa_core::entropy::build_entropy_table_with;
use easa_core::ids::RadicalTree;
use easa_core::parallel::Parallelism;
use easa_core::structure::build_codebook;
use easa_core::synth::{gen_classes, synthesize, AugmentSpec, SplitKind, SynthSpec};
use easa_core::train::{evaluate, Dictionary, Model, TrainConfig};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn spec() -> SynthSpec {
    SynthSpec {
        n_classes: 400,
        ..SynthSpec::default()
    }
}

fn codebook(c: &mut Criterion) {
    let spec = spec();
    let corpus = gen_classes(&spec).unwrap();
    let trees: Vec<RadicalTree> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let dim = 128;
    let cb = init_codebook(&spec.vocab(), dim, 1).unwrap();
    let pt = PositionTable::init(8, dim, 1);
    let mut g = c.benchmark_group("build_codebook");
    for (name, par) in MODES {
        let et = build_entropy_table_with(&trees, par).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| build_codebook(black_box(&corpus), &cb, &pt, &et, par).unwrap())
        });
    }
    g.finish();
}

fn synth(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let aug = AugmentSpec::default();
    let mut g = c.benchmark_group("synthesize");
    g.sample_size(10);
    for (name, par) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| synthesize(black_box(&spec), 2.0 / 3.0, 10, &aug, par).unwrap())
        });
    }
    g.finish();
}

fn eval(c: &mut Criterion) {
    let cfg = TrainConfig {
        dim: 32,
        ..TrainConfig::default()
    };
    let ds = synthesize(
        &SynthSpec::default(),
        2.0 / 3.0,
        10,
        &AugmentSpec::default(),
        Parallelism::Sequential,
    )
    .unwrap();
    let dict = Dictionary::from_dataset(&ds, cfg.dim, 1).unwrap();
    let model = Model::init(cfg.dim, cfg.heads, cfg.encoder, 1).unwrap();
    let loss = cfg.loss();
    let mut g = c.benchmark_group("evaluate_unseen");
    g.sample_size(10);
    for (name, par) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| evaluate(&model, black_box(&ds), &dict, SplitKind::Unseen, &loss, par).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, codebook, synth, eval);
criterion_main!(benches);
