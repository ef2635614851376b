// SPDX-License-Identifier: Apache-2.0

//! Training and evaluation of the visual encoder and matching head.
//!
//! The encoder cuts a 16×16 area-averaged copy of the glyph into
//! non-overlapping patches and projects each patch to a `d`-dimensional
//! token. Training minimises the softmax cross-entropy of the final
//! ranking scores (divided by a temperature) over the seen classes with
//! plain mini-batch gradient descent. Gradients are propagated by hand
//! through the ranking stages, the gated fusion, the entropy tokens (into
//! the position table) and the encoder.
//!
//! Per-sample work may run on the rayon pool; results are reduced in sample
//! order, so the thread count never changes a single bit of the output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{to_f32, Container, ContainerError, Entry};
use crate::embedding::{init_codebook, EmbeddingCodebook, EmbeddingError, PositionTable, DEFAULT_MAX_LEN};
use crate::entropy::{build_entropy_table, EntropyError, EntropyTable};
use crate::ids::RadicalTree;
use crate::image::GrayImage;
use crate::matching::{
    gate_fusion_backward, gate_fusion_trace, rank_backward, rank_trace, score, FusedPrototype, FusionInput,
    FusionTrace, MatchError, MatchHead, Metric, RankTrace, VisualFeatures, VisualKeys, BRANCHES,
};
use crate::parallel::Parallelism;
use crate::structure::{build_codebook, CharPrototype, PrototypeCodebook, StructuralPrior, StructureError};
use crate::synth::{Dataset, SplitKind, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("no samples in the {0} split")]
    EmptySplit(&'static str),
    #[error("no support samples for class {0}")]
    EmptySupport(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub const INPUT_SIDE: usize = 16;
pub const PATCH: usize = 4;

// ---------------------------------------------------------------------------
// Encoder

/// Encoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// `X W + b`, one bias shared by every token.
    Linear,
    /// `X W + b + B_t` with a learned per-token bias `B_t`.
    Positional,
    /// `relu(X W + b + B_t)`.
    #[default]
    PositionalRelu,
}

impl EncoderKind {
    pub fn positional(self) -> bool {
        self != EncoderKind::Linear
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(EncoderKind::Linear),
            "positional" => Ok(EncoderKind::Positional),
            "positional_relu" => Ok(EncoderKind::PositionalRelu),
            other => Err(format!(
                "unknown encoder {other:?} (linear, positional, positional_relu)"
            )),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Linear => "linear",
            EncoderKind::Positional => "positional",
            EncoderKind::PositionalRelu => "positional_relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    pub patch: usize,
    pub side: usize,
    /// `patch² × d`.
    pub proj: Array2<f64>,
    pub bias: Array1<f64>,
    /// `N_v × d`; stays zero for [`EncoderKind::Linear`].
    pub token_bias: Array2<f64>,
}

impl EncoderParams {
    pub fn zeros(dim: usize, kind: EncoderKind) -> Self {
        let tokens = (INPUT_SIDE / PATCH).pow(2);
        Self {
            kind,
            patch: PATCH,
            side: INPUT_SIDE,
            proj: Array2::zeros((PATCH * PATCH, dim)),
            bias: Array1::zeros(dim),
            token_bias: Array2::zeros((tokens, dim)),
        }
    }

    pub fn init(dim: usize, kind: EncoderKind, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim, kind);
        let scale = 1.0 / PATCH as f64;
        p.proj.mapv_inplace(|_| {
            let x: f64 = rng.sample(StandardNormal);
            (x * scale) as f32 as f64
        });
        if kind.positional() {
            let scale = 1.0 / (dim as f64).sqrt();
            p.token_bias.mapv_inplace(|_| {
                let x: f64 = rng.sample(StandardNormal);
                (x * scale) as f32 as f64
            });
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.proj.ncols()
    }

    pub fn tokens(&self) -> usize {
        (self.side / self.patch).pow(2)
    }
}

/// Flattened patches of the resampled image, one row per token, patches in
/// row-major order and pixels row-major inside each patch.
pub fn image_patches(image: &GrayImage, side: usize, patch: usize) -> Array2<f64> {
    let small = image.area_resample(side, side);
    let per_row = side / patch;
    let mut out = Array2::zeros((per_row * per_row, patch * patch));
    for py in 0..per_row {
        for px in 0..per_row {
            let mut row = out.row_mut(py * per_row + px);
            for y in 0..patch {
                for x in 0..patch {
                    row[y * patch + x] = small[(py * patch + y) * side + px * patch + x];
                }
            }
        }
    }
    out
}

pub fn encode_patches(patches: &Array2<f64>, params: &EncoderParams) -> Result<VisualFeatures, TrainError> {
    if patches.ncols() != params.proj.nrows() {
        return Err(TrainError::DimensionMismatch {
            expected: params.proj.nrows(),
            found: patches.ncols(),
        });
    }
    if patches.nrows() != params.token_bias.nrows() {
        return Err(TrainError::DimensionMismatch {
            expected: params.token_bias.nrows(),
            found: patches.nrows(),
        });
    }
    let mut tokens = patches.dot(&params.proj) + &params.bias;
    if params.kind.positional() {
        tokens += &params.token_bias;
    }
    if params.kind == EncoderKind::PositionalRelu {
        tokens.mapv_inplace(|x| x.max(0.0));
    }
    Ok(VisualFeatures::new(tokens))
}

pub fn encode_image(image: &GrayImage, params: &EncoderParams) -> Result<VisualFeatures, TrainError> {
    if params.patch == 0 || !params.side.is_multiple_of(params.patch) {
        return Err(TrainError::BadConfig(format!(
            "patch {} does not tile side {}",
            params.patch, params.side
        )));
    }
    encode_patches(&image_patches(image, params.side, params.patch), params)
}

// ---------------------------------------------------------------------------
// Model

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: MatchHead,
    pub position: PositionTable,
}

const MODEL_STREAM: u64 = 0x6d6f_6465_6c00_0001;

impl Model {
    pub fn init(dim: usize, heads: usize, kind: EncoderKind, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MODEL_STREAM);
        Ok(Self {
            encoder: EncoderParams::init(dim, kind, &mut rng),
            head: MatchHead::init(dim, heads, &mut rng)?,
            position: PositionTable::init(DEFAULT_MAX_LEN, dim, seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut position = self.position.clone();
        position.rows.fill(0.0);
        Self {
            encoder: EncoderParams::zeros(self.dim(), self.encoder.kind),
            head: self.head.zeros_like(),
            position,
        }
    }

    /// Disables the four structural branches, leaving the code term only.
    pub fn code_only(mut self) -> Self {
        self.head.fusion.active = [false; 4];
        self
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let f = &self.head.fusion;
        let a = &self.head.attention;
        let mut out: Vec<(String, &[f64])> = vec![
            ("encoder.proj".into(), slice(&self.encoder.proj)),
            ("encoder.bias".into(), self.encoder.bias.as_slice().expect("contiguous")),
            ("encoder.token_bias".into(), slice(&self.encoder.token_bias)),
        ];
        for (i, b) in BRANCHES.iter().enumerate() {
            out.push((format!("fusion.proj.{b}"), slice(&f.proj[i])));
            out.push((
                format!("fusion.proj_bias.{b}"),
                f.proj_bias[i].as_slice().expect("contiguous"),
            ));
            out.push((format!("fusion.gate.{b}"), slice(&f.gate[i])));
            out.push((
                format!("fusion.gate_bias.{b}"),
                f.gate_bias[i].as_slice().expect("contiguous"),
            ));
        }
        out.push(("fusion.code".into(), slice(&f.code)));
        out.push(("attention.wq".into(), slice(&a.wq)));
        out.push(("attention.wk".into(), slice(&a.wk)));
        out.push(("attention.wv".into(), slice(&a.wv)));
        out.push(("position".into(), slice(&self.position.rows)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let f = &mut self.head.fusion;
        let a = &mut self.head.attention;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("encoder.proj".into(), slice_mut(&mut self.encoder.proj)),
            (
                "encoder.bias".into(),
                self.encoder.bias.as_slice_mut().expect("contiguous"),
            ),
            ("encoder.token_bias".into(), slice_mut(&mut self.encoder.token_bias)),
        ];
        let (proj, proj_bias, gate, gate_bias) = (&mut f.proj, &mut f.proj_bias, &mut f.gate, &mut f.gate_bias);
        for (i, ((p, pb), (g, gb))) in proj
            .iter_mut()
            .zip(proj_bias.iter_mut())
            .zip(gate.iter_mut().zip(gate_bias.iter_mut()))
            .enumerate()
        {
            let b = BRANCHES[i];
            out.push((format!("fusion.proj.{b}"), slice_mut(p)));
            out.push((format!("fusion.proj_bias.{b}"), pb.as_slice_mut().expect("contiguous")));
            out.push((format!("fusion.gate.{b}"), slice_mut(g)));
            out.push((format!("fusion.gate_bias.{b}"), gb.as_slice_mut().expect("contiguous")));
        }
        out.push(("fusion.code".into(), slice_mut(&mut f.code)));
        out.push(("attention.wq".into(), slice_mut(&mut a.wq)));
        out.push(("attention.wk".into(), slice_mut(&mut a.wk)));
        out.push(("attention.wv".into(), slice_mut(&mut a.wv)));
        out.push(("position".into(), slice_mut(&mut self.position.rows)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Tensors that exist but are not trained.
    pub fn is_frozen(&self, tensor: &str) -> bool {
        match tensor {
            "position" => !self.position.trainable,
            "encoder.token_bias" => !self.encoder.kind.positional(),
            _ => false,
        }
    }

    /// `self -= lr · grads` over the trainable tensors.
    pub fn descend(&mut self, grads: &Model, lr: f64) {
        let frozen: Vec<bool> = self.tensors().iter().map(|(n, _)| self.is_frozen(n)).collect();
        for (((_, p), (_, g)), frozen) in self.tensors_mut().into_iter().zip(grads.tensors()).zip(frozen) {
            if frozen {
                continue;
            }
            for (x, d) in p.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    }

    fn add_assign(&mut self, other: &Model) {
        for ((_, p), (_, g)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, d) in p.iter_mut().zip(g) {
                *x += d;
            }
        }
    }

    /// Rounds every tensor to binary32, the checkpoint precision.
    pub fn quantize(&mut self) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

// ---------------------------------------------------------------------------
// Dictionary: radical embeddings, entropy and per-class priors

#[derive(Debug, Clone)]
pub struct Dictionary {
    pub embeddings: EmbeddingCodebook,
    pub entropy: EntropyTable,
    pub classes: Vec<(String, RadicalTree)>,
}

impl Dictionary {
    /// Entropy is counted over every class tree of the dataset.
    pub fn from_dataset(ds: &Dataset, dim: usize, seed: u64) -> Result<Self, TrainError> {
        let trees: Vec<RadicalTree> = ds.classes.iter().map(|(_, t)| t.clone()).collect();
        Ok(Self {
            embeddings: init_codebook(&ds.vocab, dim, seed)?,
            entropy: build_entropy_table(&trees)?,
            classes: ds.classes.clone(),
        })
    }

    fn select<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<(String, RadicalTree)>, TrainError> {
        labels
            .iter()
            .map(|l| {
                self.classes
                    .iter()
                    .find(|(c, _)| c == l.as_ref())
                    .cloned()
                    .ok_or_else(|| TrainError::BadConfig(format!("class {} not in the dictionary", l.as_ref())))
            })
            .collect()
    }

    pub fn priors<S: AsRef<str>>(
        &self,
        labels: &[S],
        ptable: &PositionTable,
    ) -> Result<Vec<StructuralPrior>, TrainError> {
        self.select(labels)?
            .iter()
            .map(|(l, t)| {
                Ok(StructuralPrior::encode(
                    l.clone(),
                    t,
                    &self.embeddings,
                    ptable,
                    &self.entropy,
                )?)
            })
            .collect()
    }

    /// Offline prototype codebook under the given position table.
    pub fn codebook<S: AsRef<str>>(
        &self,
        labels: &[S],
        ptable: &PositionTable,
        par: Parallelism,
    ) -> Result<PrototypeCodebook, TrainError> {
        Ok(build_codebook(
            &self.select(labels)?,
            &self.embeddings,
            ptable,
            &self.entropy,
            par,
        )?)
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// A preprocessed sample: patches plus the index of its class among the
/// candidates.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub target: usize,
    pub patches: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub k: usize,
    pub metric: Metric,
    pub tau: f64,
}

struct FusedWithTrace {
    proto: CharPrototype,
    global: FusionTrace,
    nodes: Vec<FusionTrace>,
    fused: FusedPrototype,
}

fn fuse_with_trace(proto: CharPrototype, model: &Model) -> Result<FusedWithTrace, TrainError> {
    let params = &model.head.fusion;
    let global = gate_fusion_trace(&FusionInput::global(&proto), params)?;
    let nodes = (0..proto.len())
        .map(|i| gate_fusion_trace(&FusionInput::node(&proto, i), params))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sequence = Array2::zeros((nodes.len(), model.dim()));
    for (i, t) in nodes.iter().enumerate() {
        sequence.row_mut(i).assign(&t.output);
    }
    let fused = FusedPrototype {
        label: proto.label.clone(),
        global: global.output.clone(),
        sequence,
    };
    Ok(FusedWithTrace {
        proto,
        global,
        nodes,
        fused,
    })
}

/// `-log softmax(logits)[target]` and the softmax.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

struct SampleGrad {
    loss: f64,
    model: Model,
    d_global: Vec<(usize, Array1<f64>)>,
    d_sequence: Vec<(usize, Array2<f64>)>,
}

fn sample_forward(
    model: &Model,
    candidates: &[FusedPrototype],
    sample: &SampleInput,
    cfg: &LossConfig,
) -> Result<(VisualFeatures, VisualKeys, RankTrace), TrainError> {
    let visual = encode_patches(&sample.patches, &model.encoder)?;
    let keys = VisualKeys::new(visual.tokens.view(), &model.head.attention);
    let trace = rank_trace(&visual, &keys, candidates, &model.head.attention, cfg.k, cfg.metric)?;
    Ok((visual, keys, trace))
}

fn sample_grad(
    model: &Model,
    candidates: &[FusedPrototype],
    sample: &SampleInput,
    cfg: &LossConfig,
    weight: f64,
) -> Result<SampleGrad, TrainError> {
    let (visual, keys, trace) = sample_forward(model, candidates, sample, cfg)?;
    let logits: Vec<f64> = trace.scores.iter().map(|s| s / cfg.tau).collect();
    let (loss, probs) = cross_entropy(&logits, sample.target);
    let d_scores: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, p)| weight * (p - (c == sample.target) as u8 as f64) / cfg.tau)
        .collect();
    let mut grads = model.zeros_like();
    let rg = rank_backward(
        &visual,
        &keys,
        candidates,
        &model.head.attention,
        cfg.metric,
        &trace,
        &d_scores,
        &mut grads.head.attention,
    )?;
    let mut d_pre = rg.d_tokens;
    if model.encoder.kind == EncoderKind::PositionalRelu {
        // tokens are zero exactly where the pre-activation was clipped
        d_pre.zip_mut_with(&visual.tokens, |d, &t| {
            if t <= 0.0 {
                *d = 0.0;
            }
        });
    }
    grads.encoder.proj = sample.patches.t().dot(&d_pre);
    grads.encoder.bias = d_pre.sum_axis(Axis(0));
    if model.encoder.kind.positional() {
        grads.encoder.token_bias = d_pre;
    }
    Ok(SampleGrad {
        loss,
        model: grads,
        d_global: rg.d_global,
        d_sequence: rg.d_sequence,
    })
}

/// Candidate prototypes under the model's current position table.
pub fn candidate_prototypes(priors: &[StructuralPrior], model: &Model) -> Result<Vec<CharPrototype>, TrainError> {
    priors.iter().map(|p| Ok(p.prototype(&model.position)?)).collect()
}

pub fn fuse_candidates(protos: &[CharPrototype], model: &Model) -> Result<Vec<FusedPrototype>, TrainError> {
    protos
        .iter()
        .map(|p| Ok(fuse_with_trace(p.clone(), model)?.fused))
        .collect()
}

/// Per-sample losses over `batch`.
pub fn batch_losses(
    model: &Model,
    priors: &[StructuralPrior],
    batch: &[&SampleInput],
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<Vec<f64>, TrainError> {
    let candidates = fuse_candidates(&candidate_prototypes(priors, model)?, model)?;
    par.map(batch, |s| {
        let (_, _, trace) = sample_forward(model, &candidates, s, cfg)?;
        let logits: Vec<f64> = trace.scores.iter().map(|x| x / cfg.tau).collect();
        Ok(cross_entropy(&logits, s.target).0)
    })
    .into_iter()
    .collect()
}

/// Mean loss over `batch`.
pub fn batch_loss(
    model: &Model,
    priors: &[StructuralPrior],
    batch: &[&SampleInput],
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<f64, TrainError> {
    let losses = batch_losses(model, priors, batch, cfg, par)?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Per-sample losses and the gradient of the mean loss.
pub fn batch_gradient(
    model: &Model,
    priors: &[StructuralPrior],
    batch: &[&SampleInput],
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<(Vec<f64>, Model), TrainError> {
    let fused = candidate_prototypes(priors, model)?
        .into_iter()
        .map(|p| fuse_with_trace(p, model))
        .collect::<Result<Vec<_>, _>>()?;
    let candidates: Vec<FusedPrototype> = fused.iter().map(|f| f.fused.clone()).collect();
    let weight = 1.0 / batch.len() as f64;
    let per_sample = par.map(batch, |s| sample_grad(model, &candidates, s, cfg, weight));

    let dim = model.dim();
    let mut grads = model.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    let mut d_global: Vec<Option<Array1<f64>>> = vec![None; fused.len()];
    let mut d_sequence: Vec<Option<Array2<f64>>> = vec![None; fused.len()];
    for sg in per_sample {
        let sg = sg?;
        losses.push(sg.loss);
        grads.add_assign(&sg.model);
        for (c, d) in sg.d_global {
            match &mut d_global[c] {
                Some(acc) => *acc += &d,
                slot => *slot = Some(d),
            }
        }
        for (c, d) in sg.d_sequence {
            match &mut d_sequence[c] {
                Some(acc) => *acc += &d,
                slot => *slot = Some(d),
            }
        }
    }

    // fusion, then entropy tokens v_i = (H_i e_i) ⊙ p_i into the position table
    let mut d_position = Array2::<f64>::zeros(model.position.rows.raw_dim());
    for (c, f) in fused.iter().enumerate() {
        let w = &priors[c].weighted_code;
        if let Some(dg) = &d_global[c] {
            let (d_branches, _) = gate_fusion_backward(
                &FusionInput::global(&f.proto),
                &f.global,
                dg.view(),
                &model.head.fusion,
                &mut grads.head.fusion,
            );
            let scale = 1.0 / w.len() as f64;
            for (i, wi) in w.iter().enumerate() {
                let mut row = d_position.row_mut(i);
                row.scaled_add(scale, &(&d_branches[0] * wi));
            }
        }
        if let Some(ds) = &d_sequence[c] {
            for (i, wi) in w.iter().enumerate() {
                let (d_branches, _) = gate_fusion_backward(
                    &FusionInput::node(&f.proto, i),
                    &f.nodes[i],
                    ds.row(i),
                    &model.head.fusion,
                    &mut grads.head.fusion,
                );
                let mut row = d_position.row_mut(i);
                row += &(&d_branches[0] * wi);
            }
        }
    }
    debug_assert_eq!(d_position.ncols(), dim);
    grads.position.rows = d_position;
    Ok((losses, grads))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub k: usize,
    pub metric: Metric,
    pub seed: u64,
    pub code_only: bool,
    pub encoder: EncoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            epochs: 30,
            batch: 32,
            lr: 0.5,
            tau: 0.1,
            k: 5,
            metric: Metric::Cosine,
            seed: 42,
            code_only: false,
            encoder: EncoderKind::PositionalRelu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if self.dim == 0 || self.heads == 0 || self.epochs == 0 || self.batch == 0 || self.k == 0 {
            return bad("dim, heads, epochs, batch and k must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            k: self.k,
            metric: self.metric,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    /// `(epoch, mean loss)`, epochs counted from 1.
    pub losses: Vec<(usize, f64)>,
}

pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses {
        out.push_str(&format!("{e},{l:.9}\n"));
    }
    out
}

/// Preprocessed samples of one split, targets indexed into `labels`.
pub fn prepare_samples<S: AsRef<str>>(
    ds: &Dataset,
    split: SplitKind,
    labels: &[S],
    patch: usize,
    side: usize,
    par: Parallelism,
) -> Vec<SampleInput> {
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_ref(), i)).collect();
    let picked: Vec<_> = ds
        .samples_of(split)
        .filter_map(|s| index.get(s.label.as_str()).map(|&t| (t, &s.image)))
        .collect();
    par.map(&picked, |(t, img)| SampleInput {
        target: *t,
        patches: image_patches(img, side, patch),
    })
}

const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6500;

/// Trains on the seen split. Samples are reshuffled every epoch.
pub fn train(ds: &Dataset, dict: &Dictionary, cfg: &TrainConfig, par: Parallelism) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let seen = &ds.split.seen;
    if seen.len() < 2 {
        return Err(TrainError::EmptySplit("seen"));
    }
    let mut model = Model::init(cfg.dim, cfg.heads, cfg.encoder, cfg.seed)?;
    if cfg.code_only {
        model = model.code_only();
    }
    let samples = prepare_samples(ds, SplitKind::Seen, seen, PATCH, INPUT_SIDE, par);
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("seen"));
    }
    let out = train_samples(model, dict, seen, &samples, cfg, par)?;
    Ok(out)
}

/// Training loop over preprocessed samples.
pub fn train_samples<S: AsRef<str>>(
    mut model: Model,
    dict: &Dictionary,
    labels: &[S],
    samples: &[SampleInput],
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<TrainOutput, TrainError> {
    let loss_cfg = cfg.loss();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut per_sample = vec![0.0; samples.len()];
        for chunk in order.chunks(cfg.batch) {
            // priors depend on the position table only through the tokens
            let priors = dict.priors(labels, &model.position)?;
            let batch: Vec<&SampleInput> = chunk.iter().map(|&i| &samples[i]).collect();
            let (batch_losses, grads) = batch_gradient(&model, &priors, &batch, &loss_cfg, par)?;
            for (&i, l) in chunk.iter().zip(batch_losses) {
                per_sample[i] = l;
            }
            model.descend(&grads, cfg.lr);
        }
        let mean = per_sample.iter().sum::<f64>() / samples.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(TrainError::DivergedLoss { epoch });
        }
        losses.push((epoch, mean));
    }
    model.quantize();
    Ok(TrainOutput { model, losses })
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tensors: Vec<GradCheckEntry>,
}

/// Denominator floor of the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares analytic gradients of the mean batch loss with central
/// differences on every parameter entry.
pub fn gradient_check(
    model: &Model,
    priors_of: &dyn Fn(&Model) -> Result<Vec<StructuralPrior>, TrainError>,
    batch: &[&SampleInput],
    cfg: &LossConfig,
) -> Result<GradCheckReport, TrainError> {
    let priors = priors_of(model)?;
    let (_, analytic) = batch_gradient(model, &priors, batch, cfg, Parallelism::Sequential)?;
    let grads = analytic.tensors();
    let loss_at = |m: &Model| -> Result<f64, TrainError> {
        let priors = priors_of(m)?;
        batch_loss(m, &priors, batch, cfg, Parallelism::Sequential)
    };
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let mut worst = 0.0f64;
    for (t, (name, g)) in grads.iter().enumerate() {
        if model.is_frozen(name) {
            continue;
        }
        let mut entry = GradCheckEntry {
            tensor: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
        };
        for (j, &a) in g.iter().enumerate() {
            let orig = model.tensors()[t].1[j];
            probe.tensors_mut()[t].1[j] = orig + GRADCHECK_STEP;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[t].1[j] = orig - GRADCHECK_STEP;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[t].1[j] = orig;
            let n = (up - down) / (2.0 * GRADCHECK_STEP);
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(GRADCHECK_FLOOR);
            entry.max_rel_err = entry.max_rel_err.max(rel);
            entry.max_abs_err = entry.max_abs_err.max(abs);
            entry.checked += 1;
        }
        worst = worst.max(entry.max_rel_err);
        tensors.push(entry);
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        tensors,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub classes: usize,
    pub k: usize,
    pub metric: Metric,
    pub top1: f64,
    pub top5: f64,
    /// true label → predicted label → count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn order_by_score(scores: &[f64], labels: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| labels[a].cmp(labels[b])));
    order
}

fn report_from_rankings(rankings: Vec<(usize, Vec<usize>)>, labels: &[&str], cfg: &LossConfig) -> EvalReport {
    let n = rankings.len();
    let (mut top1, mut top5) = (0usize, 0usize);
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (target, order) in rankings {
        top1 += (order[0] == target) as usize;
        top5 += order.iter().take(5).any(|&c| c == target) as usize;
        *confusion
            .entry(labels[target].to_string())
            .or_default()
            .entry(labels[order[0]].to_string())
            .or_insert(0) += 1;
    }
    EvalReport {
        samples: n,
        classes: labels.len(),
        k: cfg.k,
        metric: cfg.metric,
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
        confusion,
    }
}

/// Ranks every sample against `candidates` (whose order defines targets).
pub fn evaluate_samples(
    model: &Model,
    candidates: &[FusedPrototype],
    samples: &[SampleInput],
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let labels: Vec<&str> = candidates.iter().map(|c| c.label.as_str()).collect();
    let rankings = par
        .map(samples, |s| -> Result<(usize, Vec<usize>), TrainError> {
            let (_, _, trace) = sample_forward(model, candidates, s, cfg)?;
            Ok((s.target, order_by_score(&trace.scores, &labels)))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_rankings(rankings, &labels, cfg))
}

/// Fused candidates of `labels` from the offline codebook.
pub fn fused_codebook<S: AsRef<str>>(
    model: &Model,
    dict: &Dictionary,
    labels: &[S],
    par: Parallelism,
) -> Result<Vec<FusedPrototype>, TrainError> {
    let book = dict.codebook(labels, &model.position, par)?;
    fuse_candidates(book.entries(), model)
}

/// Zero-shot protocol for the unseen split: only unseen classes compete.
/// For the seen split, only seen classes compete.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    dict: &Dictionary,
    split: SplitKind,
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<EvalReport, TrainError> {
    let labels = match split {
        SplitKind::Seen => &ds.split.seen,
        SplitKind::Unseen => &ds.split.unseen,
    };
    if labels.is_empty() {
        return Err(TrainError::EmptySplit(split.as_str()));
    }
    let candidates = fused_codebook(model, dict, labels, par)?;
    let samples = prepare_samples(ds, split, labels, model.encoder.patch, model.encoder.side, par);
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(split.as_str()));
    }
    evaluate_samples(model, &candidates, &samples, cfg, par)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub top1: f64,
    pub top5: f64,
}

pub const K_SWEEP: [usize; 5] = [1, 2, 3, 5, 7];

/// Unseen-split accuracy of one trained model for each shortlist size.
pub fn k_sweep(
    model: &Model,
    ds: &Dataset,
    dict: &Dictionary,
    ks: &[usize],
    metric: Metric,
    tau: f64,
    par: Parallelism,
) -> Result<Vec<KSweepRow>, TrainError> {
    ks.iter()
        .map(|&k| {
            let r = evaluate(model, ds, dict, SplitKind::Unseen, &LossConfig { k, metric, tau }, par)?;
            Ok(KSweepRow {
                k,
                top1: r.top1,
                top5: r.top5,
            })
        })
        .collect()
}

pub fn k_sweep_table(rows: &[KSweepRow]) -> String {
    let mut out = String::from("k,top1,top5\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.top1, r.top5));
    }
    out
}

// ---------------------------------------------------------------------------
// Few-shot

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub lambda: f64,
    /// label → (number of samples, mean global token).
    pub prototypes: BTreeMap<String, (usize, Array1<f64>)>,
}

/// Averages the global visual tokens of the support samples per class.
pub fn register_support(
    model: &Model,
    support: &[(String, &GrayImage)],
    lambda: f64,
) -> Result<SupportSet, TrainError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::BadConfig(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut acc: BTreeMap<String, (usize, Array1<f64>)> = BTreeMap::new();
    for (label, img) in support {
        let g = encode_image(img, &model.encoder)?.global;
        let e = acc
            .entry(label.clone())
            .or_insert_with(|| (0, Array1::zeros(model.dim())));
        e.0 += 1;
        e.1 += &g;
    }
    if acc.is_empty() {
        return Err(TrainError::EmptySupport("any".into()));
    }
    for (n, v) in acc.values_mut() {
        *v /= *n as f64;
    }
    Ok(SupportSet {
        lambda,
        prototypes: acc,
    })
}

/// `λ · cos(g, support prototype) + (1 − λ) · final`.
pub fn evaluate_fewshot(
    model: &Model,
    candidates: &[FusedPrototype],
    support: &SupportSet,
    queries: &[SampleInput],
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<EvalReport, TrainError> {
    if queries.is_empty() {
        return Err(TrainError::EmptySplit("query"));
    }
    let protos = candidates
        .iter()
        .map(|c| {
            support
                .prototypes
                .get(&c.label)
                .map(|(_, v)| v)
                .ok_or_else(|| TrainError::EmptySupport(c.label.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<&str> = candidates.iter().map(|c| c.label.as_str()).collect();
    let lambda = support.lambda;
    let rankings = par
        .map(queries, |s| -> Result<(usize, Vec<usize>), TrainError> {
            let (visual, _, trace) = sample_forward(model, candidates, s, cfg)?;
            let scores = if lambda == 0.0 {
                trace.scores
            } else {
                trace
                    .scores
                    .iter()
                    .zip(&protos)
                    .map(|(f, p)| {
                        Ok(lambda * score(visual.global.view(), p.view(), Metric::Cosine)? + (1.0 - lambda) * f)
                    })
                    .collect::<Result<Vec<_>, TrainError>>()?
            };
            Ok((s.target, order_by_score(&scores, &labels)))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_rankings(rankings, &labels, cfg))
}

/// Registers the first `n_support` samples of each unseen class and
/// evaluates on the remaining ones.
pub fn fewshot_unseen(
    model: &Model,
    ds: &Dataset,
    dict: &Dictionary,
    n_support: usize,
    lambda: f64,
    cfg: &LossConfig,
    par: Parallelism,
) -> Result<EvalReport, TrainError> {
    let labels = &ds.split.unseen;
    if n_support == 0 {
        return Err(TrainError::EmptySupport("every class (N_s = 0)".into()));
    }
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut support = Vec::new();
    let mut queries = Vec::new();
    for s in ds.samples_of(SplitKind::Unseen) {
        let Some(&t) = index.get(s.label.as_str()) else {
            continue;
        };
        if s.index < n_support {
            support.push((s.label.clone(), &s.image));
        } else {
            queries.push((t, &s.image));
        }
    }
    let support = register_support(model, &support, lambda)?;
    let queries: Vec<SampleInput> = par.map(&queries, |(t, img)| SampleInput {
        target: *t,
        patches: image_patches(img, model.encoder.side, model.encoder.patch),
    });
    let candidates = fused_codebook(model, dict, labels, par)?;
    evaluate_fewshot(model, &candidates, &support, &queries, cfg, par)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub side: usize,
    pub max_len: usize,
    pub active: [bool; 4],
    pub position_trainable: bool,
    pub k: usize,
    pub metric: Metric,
    pub tau: f64,
    pub seed: u64,
}

impl ModelMeta {
    pub fn of(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            encoder: model.encoder.kind,
            dim: model.dim(),
            heads: model.head.attention.heads,
            patch: model.encoder.patch,
            side: model.encoder.side,
            max_len: model.position.max_len(),
            active: model.head.fusion.active,
            position_trainable: model.position.trainable,
            k: cfg.k,
            metric: cfg.metric,
            tau: cfg.tau,
            seed: cfg.seed,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "model.easa";
pub const META_FILE: &str = "model.json";

impl Model {
    /// One matrix entry per tensor; vectors are stored as single rows.
    pub fn to_container(&self) -> Container {
        let dim = self.dim();
        let mut c = Container::new(dim);
        for (name, t) in self.tensors() {
            c.push(
                name,
                Entry::Matrix {
                    rows: t.len() / dim,
                    data: to_f32(t.iter().copied()),
                },
            );
        }
        c
    }

    pub fn from_container(c: &Container, meta: &ModelMeta) -> Result<Self, TrainError> {
        if c.dim != meta.dim {
            return Err(TrainError::DimensionMismatch {
                expected: meta.dim,
                found: c.dim,
            });
        }
        let mut model = Model::init(meta.dim, meta.heads, meta.encoder, 0)?.zeros_like();
        model.position = PositionTable {
            rows: Array2::zeros((meta.max_len, meta.dim)),
            trainable: meta.position_trainable,
        };
        model.encoder.patch = meta.patch;
        model.encoder.side = meta.side;
        model.encoder.proj = Array2::zeros((meta.patch * meta.patch, meta.dim));
        model.encoder.token_bias = Array2::zeros(((meta.side / meta.patch).pow(2), meta.dim));
        model.head.fusion.active = meta.active;
        for (name, t) in model.tensors_mut() {
            match c.get(&name) {
                Some(Entry::Matrix { data, .. }) if data.len() == t.len() => {
                    for (x, &v) in t.iter_mut().zip(data) {
                        *x = v as f64;
                    }
                }
                Some(_) => return Err(TrainError::BadCheckpoint(format!("tensor {name} has the wrong shape"))),
                None => return Err(TrainError::BadCheckpoint(format!("tensor {name} missing"))),
            }
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, meta: &ModelMeta, dir: impl AsRef<Path>) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| TrainError::IoFailure {
        path: dir.display().to_string(),
        source,
    })?;
    model.to_container().save(dir.join(CHECKPOINT_FILE))?;
    let p = dir.join(META_FILE);
    fs::write(&p, serde_json::to_string_pretty(meta).expect("meta serializes") + "\n").map_err(|source| {
        TrainError::IoFailure {
            path: p.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, ModelMeta), TrainError> {
    let dir = dir.as_ref();
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|source| TrainError::IoFailure {
        path: p.display().to_string(),
        source,
    })?;
    let meta: ModelMeta =
        serde_json::from_str(&text).map_err(|e| TrainError::BadCheckpoint(format!("{META_FILE}: {e}")))?;
    let c = Container::load(dir.join(CHECKPOINT_FILE))?;
    Ok((Model::from_container(&c, &meta)?, meta))
}
