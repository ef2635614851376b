// SPDX-License-Identifier: Apache-2.0

use std::sync::OnceLock;

use easa_core::embedding::init_codebook;
use easa_core::experiment::ToyExperiment;
use easa_core::parallel::Parallelism;
use easa_core::synth::{synthesize, AugmentSpec, Dataset, SplitKind, SynthSpec};
use easa_core::train::{
    evaluate, evaluate_fewshot, evaluate_samples, fused_codebook, load_checkpoint, prepare_samples, register_support,
    save_checkpoint, train, Dictionary, ModelMeta, SampleInput, TrainConfig, TrainOutput, CHECKPOINT_FILE, INPUT_SIDE,
    PATCH,
};

fn par() -> Parallelism {
    Parallelism::available()
}

struct Toy {
    ds: Dataset,
    dict: Dictionary,
    cfg: TrainConfig,
    out: TrainOutput,
}

/// The toy setup at seed 42, trained once and shared.
fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let exp = ToyExperiment::default();
        let (ds, dict) = exp.prepare(42, par()).unwrap();
        let cfg = exp.config(42);
        let out = train(&ds, &dict, &cfg, par()).unwrap();
        Toy { ds, dict, cfg, out }
    })
}

#[test]
fn toy_loss_decreases_and_seen_beats_unseen() {
    let t = toy();
    assert_eq!(t.out.losses.len(), 30);
    let first = t.out.losses[0].1;
    let last = t.out.losses.last().unwrap().1;
    assert!(last < first, "{first} -> {last}");
    let loss = t.cfg.loss();
    let seen = evaluate(&t.out.model, &t.ds, &t.dict, SplitKind::Seen, &loss, par()).unwrap();
    let unseen = evaluate(&t.out.model, &t.ds, &t.dict, SplitKind::Unseen, &loss, par()).unwrap();
    assert!(seen.top1 >= unseen.top1, "seen {} unseen {}", seen.top1, unseen.top1);
    assert_eq!((seen.classes, unseen.classes), (40, 20));
    assert_eq!((seen.samples, unseen.samples), (800, 400));
}

#[test]
fn unseen_candidates_exclude_seen_classes() {
    let t = toy();
    let r = evaluate(&t.out.model, &t.ds, &t.dict, SplitKind::Unseen, &t.cfg.loss(), par()).unwrap();
    for (truth, preds) in &r.confusion {
        assert!(!t.ds.split.is_seen(truth));
        assert!(preds.keys().all(|p| !t.ds.split.is_seen(p)));
    }
}

#[test]
fn untrained_model_sits_at_chance() {
    let exp = ToyExperiment::default();
    let accs: Vec<f64> = (0..12).map(|s| exp.chance(s, par()).unwrap()).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    // Floor the spread at the binomial error of a single 400-query run.
    let bound = 3.0 * se.max((0.05 * 0.95 / 400.0f64).sqrt() / n.sqrt());
    assert!((mean - 0.05).abs() <= bound, "mean {mean} bound {bound} {accs:?}");
}

fn unseen_queries(t: &Toy) -> Vec<SampleInput> {
    prepare_samples(&t.ds, SplitKind::Unseen, &t.ds.split.unseen, PATCH, INPUT_SIDE, par())
}

#[test]
fn lambda_zero_is_zero_shot() {
    let t = toy();
    let labels = &t.ds.split.unseen;
    let candidates = fused_codebook(&t.out.model, &t.dict, labels, par()).unwrap();
    let queries = unseen_queries(t);
    let support: Vec<(String, &easa_core::image::GrayImage)> =
        t.ds.samples_of(SplitKind::Unseen)
            .filter(|s| s.index == 0)
            .map(|s| (s.label.clone(), &s.image))
            .collect();
    let set = register_support(&t.out.model, &support, 0.0).unwrap();
    let few = evaluate_fewshot(&t.out.model, &candidates, &set, &queries, &t.cfg.loss(), par()).unwrap();
    let zero = evaluate_samples(&t.out.model, &candidates, &queries, &t.cfg.loss(), par()).unwrap();
    assert_eq!(few, zero);
}

#[test]
fn lambda_one_with_self_support_is_perfect() {
    let t = toy();
    let labels = &t.ds.split.unseen;
    let candidates = fused_codebook(&t.out.model, &t.dict, labels, par()).unwrap();
    let picked: Vec<_> = t.ds.samples_of(SplitKind::Unseen).filter(|s| s.index == 0).collect();
    let support: Vec<(String, &easa_core::image::GrayImage)> =
        picked.iter().map(|s| (s.label.clone(), &s.image)).collect();
    let set = register_support(&t.out.model, &support, 1.0).unwrap();
    let queries: Vec<SampleInput> = unseen_queries(t)
        .into_iter()
        .zip(t.ds.samples_of(SplitKind::Unseen))
        .filter(|(_, s)| s.index == 0)
        .map(|(q, _)| q)
        .collect();
    assert_eq!(queries.len(), 20);
    let r = evaluate_fewshot(&t.out.model, &candidates, &set, &queries, &t.cfg.loss(), par()).unwrap();
    assert_eq!(r.top1, 1.0);
    assert!(register_support(&t.out.model, &support, 1.5).is_err());
    assert!(register_support(&t.out.model, &[], 0.5).is_err());
}

#[test]
fn fewshot_accuracy_grows_with_support() {
    let exp = ToyExperiment::default();
    let supports = [1, 2, 5];
    let mut mean = [0.0; 3];
    for seed in 1..=5 {
        let curve = exp.fewshot_curve(seed, &supports, 0.5, par()).unwrap();
        for (m, c) in mean.iter_mut().zip(curve) {
            *m += c / 5.0;
        }
    }
    assert!(mean[0] <= mean[1] && mean[1] <= mean[2], "{mean:?}");
}

fn small() -> (Dataset, Dictionary, TrainConfig) {
    let spec = SynthSpec {
        n_classes: 12,
        seed: 3,
        ..SynthSpec::default()
    };
    let ds = synthesize(&spec, 0.5, 4, &AugmentSpec::default(), par()).unwrap();
    let cfg = TrainConfig {
        dim: 16,
        epochs: 3,
        batch: 8,
        k: 3,
        seed: 3,
        ..TrainConfig::default()
    };
    let dict = Dictionary::from_dataset(&ds, cfg.dim, 3).unwrap();
    (ds, dict, cfg)
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (ds, dict, cfg) = small();
    let a = train(&ds, &dict, &cfg, Parallelism::Sequential).unwrap();
    let b = train(&ds, &dict, &cfg, Parallelism::Sequential).unwrap();
    let c = train(&ds, &dict, &cfg, par()).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model, b.model);
    assert_eq!(a.losses, c.losses);
    assert_eq!(a.model, c.model);
}

#[test]
fn zero_learning_rate_keeps_the_initial_model() {
    let (ds, dict, cfg) = small();
    let cfg = TrainConfig { lr: 0.0, ..cfg };
    let out = train(&ds, &dict, &cfg, par()).unwrap();
    let l0 = out.losses[0].1;
    assert!(out.losses.iter().all(|(_, l)| *l == l0));
    let mut init = easa_core::train::Model::init(cfg.dim, cfg.heads, cfg.encoder, cfg.seed).unwrap();
    init.quantize();
    assert_eq!(out.model, init);
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let (ds, dict, cfg) = small();
    let out = train(&ds, &dict, &cfg, par()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = ModelMeta::of(&out.model, &cfg);
    save_checkpoint(&out.model, &meta, dir.path()).unwrap();
    let (model, meta2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(meta2, meta);

    let path = dir.path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err(), "cut {cut}");
    }
}

#[test]
fn default_embeddings_are_unit_and_nearly_orthogonal() {
    let vocab = SynthSpec::default().vocab();
    let cb = init_codebook(&vocab, 64, 7).unwrap();
    let vs: Vec<_> = vocab.iter().map(|r| cb.get(r).unwrap().to_owned()).collect();
    for v in &vs {
        assert!((v.dot(v).sqrt() - 1.0).abs() <= 1e-6);
    }
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            assert!(vs[i].dot(&vs[j]).abs() < 0.5, "{i} {j}");
        }
    }
    assert_eq!(cb, init_codebook(&vocab, 64, 7).unwrap());
}
