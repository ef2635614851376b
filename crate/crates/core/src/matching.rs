// SPDX-License-Identifier: Apache-2.0

//! Semantic matching head.
//!
//! Prototypes are fused by a sigmoid-gated sum over four structural branches
//! plus a projected code term. Visual tokens are matched in three stages:
//!
//! 1. coarse: score the global visual token against every fused global
//!    prototype;
//! 2. for the top-k classes, attend from the class's fused node sequence
//!    (queries) to the visual tokens (keys/values) and mean-pool the rows;
//! 3. average the k pooled vectors into `P_robust`, add it to the global
//!    token to form `Q'`, and re-score each shortlisted class against `Q'`.
//!    The final score of a shortlisted class is the mean of its coarse and
//!    refined scores.
//!
//! Every forward step has a matching backward step used by training.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structure::{CharPrototype, PrototypeCodebook};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("k = {k} exceeds the {classes} candidate classes")]
    KTooLarge { k: usize, classes: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("{heads} heads do not divide dimension {dim}")]
    BadHeads { heads: usize, dim: usize },
    #[error("empty sequence")]
    EmptySequence,
}

/// Structural branches entering the gated sum, in order.
pub const BRANCHES: [&str; 4] = ["vent", "depth", "parent", "child"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
    L1,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "l1" => Ok(Metric::L1),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::L1 => "l1",
        })
    }
}

const COSINE_FLOOR: f64 = 1e-12;

/// Similarity, higher is better. Distances are negated.
pub fn score(a: ArrayView1<f64>, b: ArrayView1<f64>, metric: Metric) -> Result<f64, MatchError> {
    score_grad(a, b, metric).map(|(s, _, _)| s)
}

/// Score with its gradients with respect to both arguments.
pub fn score_grad(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    metric: Metric,
) -> Result<(f64, Array1<f64>, Array1<f64>), MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    match metric {
        Metric::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na <= COSINE_FLOOR || nb <= COSINE_FLOOR {
                return Err(MatchError::ZeroVector);
            }
            let s = a.dot(&b) / (na * nb);
            let da = &b / (na * nb) - &a * (s / (na * na));
            let db = &a / (na * nb) - &b * (s / (nb * nb));
            Ok((s, da, db))
        }
        Metric::Euclidean => {
            let diff = &a - &b;
            let dist = diff.dot(&diff).sqrt();
            let da = if dist > 0.0 {
                -&diff / dist
            } else {
                Array1::zeros(a.len())
            };
            let db = -&da;
            Ok((-dist, da, db))
        }
        Metric::L1 => {
            let diff = &a - &b;
            let dist = diff.iter().map(|x| x.abs()).sum::<f64>();
            let da = diff.mapv(|x| -x.signum() * (x != 0.0) as u8 as f64);
            let db = -&da;
            Ok((-dist, da, db))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = rng.sample(StandardNormal);
        (x * scale) as f32 as f64
    })
}

fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let mut row = m.row_mut(i);
        row.scaled_add(ai, &b);
    }
}

/// Gate-fusion weights. Branch order follows [`BRANCHES`].
#[derive(Debug, Clone, PartialEq)]
pub struct GateFusionParams {
    pub proj: [Array2<f64>; 4],
    pub proj_bias: [Array1<f64>; 4],
    pub gate: [Array2<f64>; 4],
    pub gate_bias: [Array1<f64>; 4],
    pub code: Array2<f64>,
    /// Disabled branches contribute nothing (ablations).
    pub active: [bool; 4],
}

impl GateFusionParams {
    pub fn zeros(dim: usize) -> Self {
        let m = || Array2::zeros((dim, dim));
        let v = || Array1::zeros(dim);
        Self {
            proj: [m(), m(), m(), m()],
            proj_bias: [v(), v(), v(), v()],
            gate: [m(), m(), m(), m()],
            gate_bias: [v(), v(), v(), v()],
            code: m(),
            active: [true; 4],
        }
    }

    /// Gaussian init scaled by `1/sqrt(dim)`, zero biases.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut p = Self::zeros(dim);
        for i in 0..4 {
            p.proj[i] = random_matrix(rng, dim, dim, scale);
            p.gate[i] = random_matrix(rng, dim, dim, scale);
        }
        p.code = random_matrix(rng, dim, dim, scale);
        p
    }

    pub fn dim(&self) -> usize {
        self.code.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dim());
        z.active = self.active;
        z
    }
}

/// One fusion input: four branch vectors and the code vector.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a> {
    pub branches: [ArrayView1<'a, f64>; 4],
    pub code: ArrayView1<'a, f64>,
}

impl<'a> FusionInput<'a> {
    pub fn global(p: &'a CharPrototype) -> Self {
        Self {
            branches: [p.v_ent.view(), p.f_depth.view(), p.f_parent.view(), p.f_child.view()],
            code: p.f_code.view(),
        }
    }

    pub fn node(p: &'a CharPrototype, i: usize) -> Self {
        let n = &p.nodes[i];
        Self {
            branches: [n.v.view(), n.depth.view(), n.parent.view(), n.child.view()],
            code: n.code.view(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// Projected branch features `W_i f_i + b_i`.
    pub projected: [Array1<f64>; 4],
    /// Gate activations `σ(W_gate,i f̃_i + b_gate,i)`.
    pub gates: [Array1<f64>; 4],
    pub output: Array1<f64>,
}

fn check_len(v: ArrayView1<f64>, dim: usize) -> Result<(), MatchError> {
    if v.len() != dim {
        return Err(MatchError::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    Ok(())
}

pub fn gate_fusion_trace(input: &FusionInput, params: &GateFusionParams) -> Result<FusionTrace, MatchError> {
    let dim = params.dim();
    for b in &input.branches {
        check_len(*b, dim)?;
    }
    check_len(input.code, dim)?;
    let mut output = params.code.dot(&input.code);
    let mut projected: [Array1<f64>; 4] = Default::default();
    let mut gates: [Array1<f64>; 4] = Default::default();
    for i in 0..4 {
        let f = params.proj[i].dot(&input.branches[i]) + &params.proj_bias[i];
        let g = (params.gate[i].dot(&f) + &params.gate_bias[i]).mapv(sigmoid);
        if params.active[i] {
            output += &(&g * &f);
        }
        projected[i] = f;
        gates[i] = g;
    }
    Ok(FusionTrace {
        projected,
        gates,
        output,
    })
}

/// `Σ_i σ(W_gate,i f̃_i + b_gate,i) ⊙ f̃_i + W_code · code`.
pub fn gate_fusion(input: &FusionInput, params: &GateFusionParams) -> Result<Array1<f64>, MatchError> {
    gate_fusion_trace(input, params).map(|t| t.output)
}

/// Accumulates parameter gradients into `grads`; returns input gradients
/// (branches, code).
pub fn gate_fusion_backward(
    input: &FusionInput,
    trace: &FusionTrace,
    d_out: ArrayView1<f64>,
    params: &GateFusionParams,
    grads: &mut GateFusionParams,
) -> ([Array1<f64>; 4], Array1<f64>) {
    add_outer(&mut grads.code, d_out, input.code);
    let d_code = params.code.t().dot(&d_out);
    let mut d_branches: [Array1<f64>; 4] = Default::default();
    for i in 0..4 {
        if !params.active[i] {
            d_branches[i] = Array1::zeros(d_out.len());
            continue;
        }
        let f = &trace.projected[i];
        let g = &trace.gates[i];
        // d/dz of g ⊙ f through the gate pre-activation z.
        let dz = &d_out * f * g * &g.mapv(|x| 1.0 - x);
        add_outer(&mut grads.gate[i], dz.view(), f.view());
        grads.gate_bias[i] += &dz;
        let df = &d_out * g + params.gate[i].t().dot(&dz);
        add_outer(&mut grads.proj[i], df.view(), input.branches[i]);
        grads.proj_bias[i] += &df;
        d_branches[i] = params.proj[i].t().dot(&df);
    }
    (d_branches, d_code)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, MatchError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(MatchError::BadHeads { heads, dim });
        }
        let m = || Array2::zeros((dim, dim));
        Ok(Self {
            heads,
            wq: m(),
            wk: m(),
            wv: m(),
        })
    }

    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, MatchError> {
        let mut p = Self::zeros(dim, heads)?;
        let scale = 1.0 / (dim as f64).sqrt();
        p.wq = random_matrix(rng, dim, dim, scale);
        p.wk = random_matrix(rng, dim, dim, scale);
        p.wv = random_matrix(rng, dim, dim, scale);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.heads).expect("shape already validated")
    }
}

/// Visual token matrix `F_v` (rows are tokens) and its mean `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Array2<f64>,
    pub global: Array1<f64>,
}

impl VisualFeatures {
    pub fn new(tokens: Array2<f64>) -> Self {
        let global = tokens
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(tokens.ncols()));
        Self { tokens, global }
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Key and value projections of the visual tokens, shared by every
/// candidate class.
#[derive(Debug, Clone)]
pub struct VisualKeys {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl VisualKeys {
    pub fn new(tokens: ArrayView2<f64>, params: &AttentionParams) -> Self {
        Self {
            keys: tokens.dot(&params.wk),
            values: tokens.dot(&params.wv),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub queries: Array2<f64>,
    /// One `L × N_v` row-stochastic matrix per head.
    pub weights: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
}

pub fn cross_attention_trace(
    p_sem: ArrayView2<f64>,
    keys: &VisualKeys,
    params: &AttentionParams,
) -> Result<AttentionTrace, MatchError> {
    let dim = params.dim();
    if p_sem.nrows() == 0 || keys.keys.nrows() == 0 {
        return Err(MatchError::EmptySequence);
    }
    if p_sem.ncols() != dim {
        return Err(MatchError::DimensionMismatch {
            expected: dim,
            found: p_sem.ncols(),
        });
    }
    let queries = p_sem.dot(&params.wq);
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut output = Array2::zeros((p_sem.nrows(), dim));
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut w = queries.slice(cols).dot(&keys.keys.slice(cols).t()) * scale;
        softmax_rows(&mut w);
        output.slice_mut(cols).assign(&w.dot(&keys.values.slice(cols)));
        weights.push(w);
    }
    Ok(AttentionTrace {
        queries,
        weights,
        output,
    })
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` per head with `Q = P_sem W_q`,
/// `K = F_v W_k`, `V = F_v W_v`; heads concatenated.
pub fn cross_attention(
    p_sem: ArrayView2<f64>,
    visual: &VisualFeatures,
    params: &AttentionParams,
) -> Result<Array2<f64>, MatchError> {
    if visual.dim() != params.dim() {
        return Err(MatchError::DimensionMismatch {
            expected: params.dim(),
            found: visual.dim(),
        });
    }
    let keys = VisualKeys::new(visual.tokens.view(), params);
    cross_attention_trace(p_sem, &keys, params).map(|t| t.output)
}

/// Gradients of one attention call. Parameter gradients are accumulated
/// into `grads`; `d_keys`/`d_values` accumulate gradients on the projected
/// keys and values. Returns the gradient on `p_sem`.
pub fn cross_attention_backward(
    p_sem: ArrayView2<f64>,
    keys: &VisualKeys,
    trace: &AttentionTrace,
    d_out: ArrayView2<f64>,
    params: &AttentionParams,
    grads: &mut AttentionParams,
    d_keys: &mut Array2<f64>,
    d_values: &mut Array2<f64>,
) -> Array2<f64> {
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_queries = Array2::zeros(trace.queries.raw_dim());
    for (h, w) in trace.weights.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let d_o = d_out.slice(cols);
        // d_out -> attention weights and values
        let d_w = d_o.dot(&keys.values.slice(cols).t());
        let mut dv = d_values.slice_mut(cols);
        dv += &w.t().dot(&d_o);
        // softmax backward, row-wise
        let row_dot = (&d_w * w).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_s = w * &(&d_w - &row_dot) * scale;
        d_queries.slice_mut(cols).assign(&d_s.dot(&keys.keys.slice(cols)));
        let mut dkk = d_keys.slice_mut(cols);
        dkk += &d_s.t().dot(&trace.queries.slice(cols));
    }
    grads.wq += &p_sem.t().dot(&d_queries);
    d_queries.dot(&params.wq.t())
}

/// Folds key/value gradients into `W_k`, `W_v` and returns the gradient on
/// the visual tokens.
pub fn visual_keys_backward(
    tokens: ArrayView2<f64>,
    d_keys: &Array2<f64>,
    d_values: &Array2<f64>,
    params: &AttentionParams,
    grads: &mut AttentionParams,
) -> Array2<f64> {
    grads.wk += &tokens.t().dot(d_keys);
    grads.wv += &tokens.t().dot(d_values);
    d_keys.dot(&params.wk.t()) + d_values.dot(&params.wv.t())
}

/// Fusion plus attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead {
    pub fusion: GateFusionParams,
    pub attention: AttentionParams,
}

impl MatchHead {
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, MatchError> {
        Ok(Self {
            fusion: GateFusionParams::init(dim, rng),
            attention: AttentionParams::init(dim, heads, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.fusion.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            attention: self.attention.zeros_like(),
        }
    }
}

/// A prototype after fusion: retrieval vector and node sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrototype {
    pub label: String,
    pub global: Array1<f64>,
    pub sequence: Array2<f64>,
}

pub fn fuse_prototype(proto: &CharPrototype, params: &GateFusionParams) -> Result<FusedPrototype, MatchError> {
    if proto.is_empty() {
        return Err(MatchError::EmptySequence);
    }
    let global = gate_fusion(&FusionInput::global(proto), params)?;
    let mut sequence = Array2::zeros((proto.len(), params.dim()));
    for i in 0..proto.len() {
        sequence
            .row_mut(i)
            .assign(&gate_fusion(&FusionInput::node(proto, i), params)?);
    }
    Ok(FusedPrototype {
        label: proto.label.clone(),
        global,
        sequence,
    })
}

pub fn fuse_codebook(
    codebook: &PrototypeCodebook,
    params: &GateFusionParams,
) -> Result<Vec<FusedPrototype>, MatchError> {
    codebook.entries().iter().map(|p| fuse_prototype(p, params)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedClass {
    pub label: String,
    pub coarse: f64,
    /// Present for shortlisted classes only.
    pub refined: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub ranked: Vec<RankedClass>,
    pub p_robust: Array1<f64>,
    pub q_prime: Array1<f64>,
}

/// Intermediate values of one ranking pass, indexed by candidate.
#[derive(Debug, Clone)]
pub struct RankTrace {
    pub coarse: Vec<f64>,
    /// Shortlisted candidate indices, best coarse score first.
    pub shortlist: Vec<usize>,
    pub attention: Vec<AttentionTrace>,
    pub pooled: Vec<Array1<f64>>,
    pub p_robust: Array1<f64>,
    pub q_prime: Array1<f64>,
    pub refined: Vec<f64>,
    pub scores: Vec<f64>,
}

impl RankTrace {
    pub fn refined_of(&self, candidate: usize) -> Option<f64> {
        self.shortlist
            .iter()
            .position(|&c| c == candidate)
            .map(|j| self.refined[j])
    }
}

fn by_score_then_label(scores: &[f64], labels: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| labels[a].cmp(labels[b]))
    });
    order
}

/// Forward pass over pre-fused candidates.
pub fn rank_trace(
    visual: &VisualFeatures,
    keys: &VisualKeys,
    candidates: &[FusedPrototype],
    attention: &AttentionParams,
    k: usize,
    metric: Metric,
) -> Result<RankTrace, MatchError> {
    if candidates.is_empty() {
        return Err(MatchError::EmptyCodebook);
    }
    if k == 0 {
        return Err(MatchError::ZeroK);
    }
    if k > candidates.len() {
        return Err(MatchError::KTooLarge {
            k,
            classes: candidates.len(),
        });
    }
    let labels: Vec<&str> = candidates.iter().map(|c| c.label.as_str()).collect();
    let coarse = candidates
        .iter()
        .map(|c| score(visual.global.view(), c.global.view(), metric))
        .collect::<Result<Vec<_>, _>>()?;
    let shortlist: Vec<usize> = by_score_then_label(&coarse, &labels).into_iter().take(k).collect();

    let mut traces = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(k);
    for &c in &shortlist {
        let t = cross_attention_trace(candidates[c].sequence.view(), keys, attention)?;
        pooled.push(t.output.mean_axis(Axis(0)).expect("non-empty sequence"));
        traces.push(t);
    }
    let mut p_robust = Array1::zeros(visual.dim());
    for a in &pooled {
        p_robust += a;
    }
    p_robust /= k as f64;
    let q_prime = &visual.global + &p_robust;
    let refined = pooled
        .iter()
        .map(|a| score(q_prime.view(), a.view(), metric))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scores = coarse.clone();
    for (j, &c) in shortlist.iter().enumerate() {
        scores[c] = 0.5 * (coarse[c] + refined[j]);
    }
    Ok(RankTrace {
        coarse,
        shortlist,
        attention: traces,
        pooled,
        p_robust,
        q_prime,
        refined,
        scores,
    })
}

/// Gradients of a ranking pass with respect to the visual tokens and the
/// fused candidates.
#[derive(Debug, Clone)]
pub struct RankGrads {
    pub d_tokens: Array2<f64>,
    /// `(candidate, d global)` for every candidate with a nonzero upstream
    /// gradient.
    pub d_global: Vec<(usize, Array1<f64>)>,
    /// `(candidate, d sequence)` for shortlisted candidates.
    pub d_sequence: Vec<(usize, Array2<f64>)>,
}

/// Backward pass given `d_scores` (one entry per candidate). Attention
/// parameter gradients accumulate into `grads`. The shortlist is treated
/// as fixed.
pub fn rank_backward(
    visual: &VisualFeatures,
    keys: &VisualKeys,
    candidates: &[FusedPrototype],
    attention: &AttentionParams,
    metric: Metric,
    trace: &RankTrace,
    d_scores: &[f64],
    grads: &mut AttentionParams,
) -> Result<RankGrads, MatchError> {
    let dim = visual.dim();
    let k = trace.shortlist.len();
    let mut d_coarse = d_scores.to_vec();
    let mut d_refined = vec![0.0; k];
    for (j, &c) in trace.shortlist.iter().enumerate() {
        d_coarse[c] = 0.5 * d_scores[c];
        d_refined[j] = 0.5 * d_scores[c];
    }

    let mut d_g = Array1::<f64>::zeros(dim);
    let mut d_global = Vec::new();
    for (c, &dc) in d_coarse.iter().enumerate() {
        if dc == 0.0 {
            continue;
        }
        let (_, da, db) = score_grad(visual.global.view(), candidates[c].global.view(), metric)?;
        d_g.scaled_add(dc, &da);
        d_global.push((c, db * dc));
    }

    // refined(c) = score(Q', a(c)), Q' = g + mean_j a(j)
    let mut d_pooled: Vec<Array1<f64>> = vec![Array1::zeros(dim); k];
    let mut d_q = Array1::<f64>::zeros(dim);
    for j in 0..k {
        if d_refined[j] == 0.0 {
            continue;
        }
        let (_, dq, da) = score_grad(trace.q_prime.view(), trace.pooled[j].view(), metric)?;
        d_q.scaled_add(d_refined[j], &dq);
        d_pooled[j].scaled_add(d_refined[j], &da);
    }
    d_g += &d_q;
    for dp in &mut d_pooled {
        dp.scaled_add(1.0 / k as f64, &d_q);
    }

    let mut d_keys = Array2::zeros(keys.keys.raw_dim());
    let mut d_values = Array2::zeros(keys.values.raw_dim());
    let mut d_sequence = Vec::with_capacity(k);
    for (j, &c) in trace.shortlist.iter().enumerate() {
        let rows = candidates[c].sequence.nrows();
        let row = (&d_pooled[j] / rows as f64).insert_axis(Axis(0));
        let d_out = row.broadcast((rows, dim)).expect("broadcast row").to_owned();
        let d_seq = cross_attention_backward(
            candidates[c].sequence.view(),
            keys,
            &trace.attention[j],
            d_out.view(),
            attention,
            grads,
            &mut d_keys,
            &mut d_values,
        );
        d_sequence.push((c, d_seq));
    }

    let mut d_tokens = visual_keys_backward(visual.tokens.view(), &d_keys, &d_values, attention, grads);
    let n = visual.tokens.nrows() as f64;
    for mut row in d_tokens.rows_mut() {
        row.scaled_add(1.0 / n, &d_g);
    }
    Ok(RankGrads {
        d_tokens,
        d_global,
        d_sequence,
    })
}

/// Ranks pre-fused candidates.
pub fn rank_fused(
    visual: &VisualFeatures,
    candidates: &[FusedPrototype],
    attention: &AttentionParams,
    k: usize,
    metric: Metric,
) -> Result<MatchResult, MatchError> {
    if visual.dim() != attention.dim() {
        return Err(MatchError::DimensionMismatch {
            expected: attention.dim(),
            found: visual.dim(),
        });
    }
    let keys = VisualKeys::new(visual.tokens.view(), attention);
    let trace = rank_trace(visual, &keys, candidates, attention, k, metric)?;
    let labels: Vec<&str> = candidates.iter().map(|c| c.label.as_str()).collect();
    let ranked = by_score_then_label(&trace.scores, &labels)
        .into_iter()
        .map(|c| RankedClass {
            label: candidates[c].label.clone(),
            coarse: trace.coarse[c],
            refined: trace.refined_of(c),
            score: trace.scores[c],
        })
        .collect();
    Ok(MatchResult {
        ranked,
        p_robust: trace.p_robust,
        q_prime: trace.q_prime,
    })
}

/// Three-stage ranking of every class in `codebook`.
pub fn rank_candidates(
    visual: &VisualFeatures,
    codebook: &PrototypeCodebook,
    head: &MatchHead,
    k: usize,
    metric: Metric,
) -> Result<MatchResult, MatchError> {
    if codebook.is_empty() {
        return Err(MatchError::EmptyCodebook);
    }
    if codebook.dim() != head.dim() {
        return Err(MatchError::DimensionMismatch {
            expected: head.dim(),
            found: codebook.dim(),
        });
    }
    let fused = fuse_codebook(codebook, &head.fusion)?;
    rank_fused(visual, &fused, &head.attention, k, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_cases() {
        let v = arr1(&[1.0, -2.0, 3.0]);
        assert!((score(v.view(), v.view(), Metric::Cosine).unwrap() - 1.0).abs() < 1e-15);
        let neg = -&v;
        assert!((score(v.view(), neg.view(), Metric::Cosine).unwrap() + 1.0).abs() < 1e-15);
        let o = arr1(&[0.0, 0.0]);
        let p = arr1(&[3.0, 4.0]);
        assert_eq!(score(o.view(), p.view(), Metric::Euclidean).unwrap(), -5.0);
        assert_eq!(score(o.view(), p.view(), Metric::L1).unwrap(), -7.0);
        assert_eq!(score(o.view(), p.view(), Metric::Cosine), Err(MatchError::ZeroVector));
    }

    #[test]
    fn zero_fusion_is_zero() {
        let p = GateFusionParams::zeros(3);
        let x = arr1(&[1.0, 2.0, 3.0]);
        let input = FusionInput {
            branches: [x.view(), x.view(), x.view(), x.view()],
            code: x.view(),
        };
        let t = gate_fusion_trace(&input, &p).unwrap();
        assert!(t.output.iter().all(|&x| x == 0.0));
        assert!(t.gates.iter().all(|g| g.iter().all(|&x| x == 0.5)));
    }

    #[test]
    fn identity_projection_halves() {
        let dim = 3;
        let mut p = GateFusionParams::zeros(dim);
        for i in 0..4 {
            p.proj[i] = Array2::eye(dim);
        }
        p.code = Array2::eye(dim) * 2.0;
        let fs = [
            arr1(&[1.0, 0.0, 0.0]),
            arr1(&[0.0, 1.0, 0.0]),
            arr1(&[0.0, 0.0, 1.0]),
            arr1(&[1.0, 1.0, 1.0]),
        ];
        let code = arr1(&[1.0, -1.0, 0.5]);
        let input = FusionInput {
            branches: [fs[0].view(), fs[1].view(), fs[2].view(), fs[3].view()],
            code: code.view(),
        };
        let out = gate_fusion(&input, &p).unwrap();
        let sum = &fs[0] + &fs[1] + &fs[2] + &fs[3];
        let want = sum * 0.5 + &code * 2.0;
        assert_eq!(out, want);
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = AttentionParams::init(8, 2, &mut rng).unwrap();
        let tokens = random_matrix(&mut rng, 1, 8, 1.0);
        let visual = VisualFeatures::new(tokens.clone());
        let p_sem = random_matrix(&mut rng, 3, 8, 1.0);
        let out = cross_attention(p_sem.view(), &visual, &params).unwrap();
        let value = tokens.row(0).dot(&params.wv);
        for row in out.rows() {
            for (a, b) in row.iter().zip(value.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        assert_eq!(
            AttentionParams::zeros(8, 3),
            Err(MatchError::BadHeads { heads: 3, dim: 8 })
        );
    }

    #[test]
    fn k_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = AttentionParams::init(4, 1, &mut rng).unwrap();
        let visual = VisualFeatures::new(random_matrix(&mut rng, 2, 4, 1.0));
        let cands = vec![FusedPrototype {
            label: "a".into(),
            global: arr1(&[1.0, 0.0, 0.0, 0.0]),
            sequence: random_matrix(&mut rng, 1, 4, 1.0),
        }];
        assert_eq!(
            rank_fused(&visual, &cands, &att, 2, Metric::Cosine),
            Err(MatchError::KTooLarge { k: 2, classes: 1 })
        );
        assert_eq!(
            rank_fused(&visual, &[], &att, 1, Metric::Cosine),
            Err(MatchError::EmptyCodebook)
        );
    }

    #[test]
    fn ties_break_by_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = AttentionParams::init(4, 1, &mut rng).unwrap();
        let visual = VisualFeatures::new(random_matrix(&mut rng, 3, 4, 1.0));
        let seq = random_matrix(&mut rng, 2, 4, 1.0);
        let g = arr1(&[0.3, -0.2, 0.1, 0.9]);
        let cands: Vec<_> = ["b", "c", "a"]
            .iter()
            .map(|l| FusedPrototype {
                label: l.to_string(),
                global: g.clone(),
                sequence: seq.clone(),
            })
            .collect();
        let r = rank_fused(&visual, &cands, &att, 1, Metric::Cosine).unwrap();
        // Only "a" is shortlisted (coarse tie broken by label), so it is
        // the only class with a refined score.
        assert_eq!(r.ranked.iter().filter(|c| c.refined.is_some()).count(), 1);
        assert_eq!(r.ranked.iter().find(|c| c.refined.is_some()).unwrap().label, "a");
        let rest: Vec<_> = r
            .ranked
            .iter()
            .filter(|c| c.refined.is_none())
            .map(|c| c.label.as_str())
            .collect();
        assert_eq!(rest, ["b", "c"]);
    }
}
