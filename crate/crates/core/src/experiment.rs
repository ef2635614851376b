// SPDX-License-Identifier: Apache-2.0

//! Desk-scale experiment drivers shared by the CLI, tests and benches.

use serde::Serialize;

use crate::parallel::Parallelism;
use crate::synth::{synthesize, AugmentSpec, Dataset, SplitKind, SynthSpec};
use crate::train::{
    evaluate, fewshot_unseen, gradient_check, prepare_samples, train, Dictionary, GradCheckReport, LossConfig, Model,
    SampleInput, TrainConfig, TrainError, INPUT_SIDE, PATCH,
};

/// The toy zero-shot setup: 60 classes over 12 radicals, 40 seen and 20
/// unseen, 20 samples per class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyExperiment {
    pub spec: SynthSpec,
    pub seen_fraction: f64,
    pub per_class: usize,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            seen_fraction: 2.0 / 3.0,
            per_class: 20,
            augment: AugmentSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyOutcome {
    pub seed: u64,
    pub seen_top1: f64,
    pub unseen_top1: f64,
    pub code_only_top1: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl ToyExperiment {
    /// Dataset and dictionary for one seed.
    pub fn prepare(&self, seed: u64, par: Parallelism) -> Result<(Dataset, Dictionary), TrainError> {
        let spec = SynthSpec {
            seed,
            ..self.spec.clone()
        };
        let ds = synthesize(&spec, self.seen_fraction, self.per_class, &self.augment, par)?;
        let dict = Dictionary::from_dataset(&ds, self.train.dim, seed)?;
        Ok((ds, dict))
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Trains the full model and the code-only ablation on the same data.
    pub fn run(&self, seed: u64, par: Parallelism) -> Result<ToyOutcome, TrainError> {
        let (ds, dict) = self.prepare(seed, par)?;
        let cfg = self.config(seed);
        let loss = cfg.loss();
        let full = train(&ds, &dict, &cfg, par)?;
        let seen = evaluate(&full.model, &ds, &dict, SplitKind::Seen, &loss, par)?;
        let unseen = evaluate(&full.model, &ds, &dict, SplitKind::Unseen, &loss, par)?;
        let code_cfg = TrainConfig {
            code_only: true,
            ..cfg.clone()
        };
        let code = train(&ds, &dict, &code_cfg, par)?;
        let code_unseen = evaluate(&code.model, &ds, &dict, SplitKind::Unseen, &loss, par)?;
        Ok(ToyOutcome {
            seed,
            seen_top1: seen.top1,
            unseen_top1: unseen.top1,
            code_only_top1: code_unseen.top1,
            initial_loss: full.losses.first().map_or(f64::NAN, |l| l.1),
            final_loss: full.losses.last().map_or(f64::NAN, |l| l.1),
        })
    }

    /// Unseen Top-1 of an untrained model.
    pub fn chance(&self, seed: u64, par: Parallelism) -> Result<f64, TrainError> {
        let (ds, dict) = self.prepare(seed, par)?;
        let cfg = self.config(seed);
        let model = Model::init(cfg.dim, cfg.heads, cfg.encoder, seed)?;
        Ok(evaluate(&model, &ds, &dict, SplitKind::Unseen, &cfg.loss(), par)?.top1)
    }

    /// Few-shot Top-1 for each support size, from one trained model.
    pub fn fewshot_curve(
        &self,
        seed: u64,
        supports: &[usize],
        lambda: f64,
        par: Parallelism,
    ) -> Result<Vec<f64>, TrainError> {
        let (ds, dict) = self.prepare(seed, par)?;
        let cfg = self.config(seed);
        let model = train(&ds, &dict, &cfg, par)?.model;
        supports
            .iter()
            .map(|&n| Ok(fewshot_unseen(&model, &ds, &dict, n, lambda, &cfg.loss(), par)?.top1))
            .collect()
    }
}

/// Gradient check of a fresh model on one batch of a small synthetic set:
/// 10 classes, 2 samples each, all seen samples in the batch.
pub fn gradcheck_suite(dim: usize, seed: u64) -> Result<GradCheckReport, TrainError> {
    let spec = SynthSpec {
        n_classes: 10,
        seed,
        ..SynthSpec::default()
    };
    let ds = synthesize(&spec, 0.6, 2, &AugmentSpec::default(), Parallelism::Sequential)?;
    let dict = Dictionary::from_dataset(&ds, dim, seed)?;
    let cfg = TrainConfig {
        dim,
        heads: 2,
        k: 3,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let model = Model::init(dim, cfg.heads, cfg.encoder, seed)?;
    let seen = ds.split.seen.clone();
    let samples = prepare_samples(&ds, SplitKind::Seen, &seen, PATCH, INPUT_SIDE, Parallelism::Sequential);
    let batch: Vec<&SampleInput> = samples.iter().collect();
    let priors_of = |m: &Model| dict.priors(&seen, &m.position);
    let loss: LossConfig = cfg.loss();
    gradient_check(&model, &priors_of, &batch, &loss)
}
