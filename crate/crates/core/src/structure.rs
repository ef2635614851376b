// SPDX-License-Identifier: Apache-2.0

//! Structural encoding of radical trees.
//!
//! Each tree node gets a depth-position (DP) sinusoid. Two derived views
//! add ancestor-path context (parent-centric) and direct-children context
//! (child-centric). Together with the entropy-modulated radical tokens they
//! produce five per-class vectors:
//!
//! | vector     | definition                                          |
//! |------------|-----------------------------------------------------|
//! | `v_ent`    | mean of `e_i ⊙ (H(r_i) · p_i)`                       |
//! | `f_code`   | mean of `e_i`                                        |
//! | `f_depth`  | `Σ l_i e_i / max(l)` (zero for single-node trees)    |
//! | `f_parent` | `Σ DP_parent,i ⊙ e_i / ‖Σ DP_parent,i‖₂`             |
//! | `f_child`  | `Σ DP_child,i ⊙ e_i / ‖Σ DP_child,i‖₂`               |
//!
//! All sums run over leaves in reading order. Component indices are
//! 0-based over `[0, D)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Container, ContainerError, Entry};
use crate::embedding::{EmbeddingCodebook, EmbeddingError, PositionTable};
use crate::entropy::EntropyTable;
use crate::ids::{NodeContent, Pos, RadicalTree, RadicalVocab, TreeNode};
use crate::parallel::Parallelism;

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("invalid branch position {pos} at depth {depth}")]
    InvalidPos { depth: u32, pos: u8 },
    #[error("DP dimension must be even and positive, got {0}")]
    OddDimension(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

fn check_dim(dim: usize) -> Result<(), StructureError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(StructureError::OddDimension(dim));
    }
    Ok(())
}

/// Depth-position embedding of a node at `depth` on branch `pos`.
pub fn dp_embedding(depth: u32, pos: Pos, dim: usize) -> Result<Array1<f64>, StructureError> {
    check_dim(dim)?;
    let freq = match pos {
        Pos::Root if depth == 0 => 2.0,
        Pos::Root => {
            return Err(StructureError::InvalidPos {
                depth,
                pos: pos.index(),
            })
        }
        Pos::Left if depth > 0 => 4.0 * depth as f64 - 2.0,
        Pos::Right if depth > 0 => 4.0 * depth as f64,
        _ => {
            return Err(StructureError::InvalidPos {
                depth,
                pos: pos.index(),
            })
        }
    };
    let big_d = dim as f64;
    Ok(Array1::from_shape_fn(dim, |d| (freq * d as f64 * PI / big_d).sin()))
}

/// Parent-centric view: `DP_i + (1/l) Σ_{k=1..l} sin(4kdπ/D)`; the root
/// keeps `DP_i`.
pub fn dp_parent(node: &TreeNode, dim: usize) -> Result<Array1<f64>, StructureError> {
    let mut out = dp_embedding(node.depth, node.pos, dim)?;
    if node.depth > 0 {
        let l = node.depth as f64;
        let big_d = dim as f64;
        for (d, x) in out.iter_mut().enumerate() {
            let path: f64 = (1..=node.depth)
                .map(|k| (4.0 * k as f64 * d as f64 * PI / big_d).sin())
                .sum();
            *x += path / l;
        }
    }
    Ok(out)
}

/// Child-centric view: `DP_i` plus the mean DP of direct children; leaves
/// keep `DP_i`.
pub fn dp_child(node: &TreeNode, dim: usize) -> Result<Array1<f64>, StructureError> {
    let mut out = dp_embedding(node.depth, node.pos, dim)?;
    if !node.children.is_empty() {
        let n = node.children.len() as f64;
        let mut acc = Array1::<f64>::zeros(dim);
        for c in &node.children {
            acc += &dp_embedding(c.depth, c.pos, dim)?;
        }
        out.scaled_add(1.0 / n, &acc);
    }
    Ok(out)
}

/// Entropy-aware token `e ⊙ (H · p)`.
pub fn entropy_token(e: ArrayView1<f64>, p: ArrayView1<f64>, entropy: f64) -> Array1<f64> {
    let scaled = &p * entropy;
    &e * &scaled
}

/// Full per-leaf feature bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub depth: u32,
    pub pos: Pos,
    /// 1-based reading-order position among leaves.
    pub position: usize,
    pub entropy: f64,
    pub code: Array1<f64>,
    pub dp: Array1<f64>,
    pub dp_parent: Array1<f64>,
    pub dp_child: Array1<f64>,
    pub v: Array1<f64>,
    pub depth_tok: Array1<f64>,
    pub parent_tok: Array1<f64>,
    pub child_tok: Array1<f64>,
}

/// The five per-node vectors fed to sequence-mode fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTokens {
    pub v: Array1<f64>,
    pub code: Array1<f64>,
    pub depth: Array1<f64>,
    pub parent: Array1<f64>,
    pub child: Array1<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// `‖Σ DP_parent‖₂ < 1e-8`; the unnormalized sum was used.
    pub degenerate_parent_norm: bool,
    pub degenerate_child_norm: bool,
    /// At least one radical's entropy came from smoothing.
    pub smoothed_entropy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharPrototype {
    pub label: String,
    pub v_ent: Array1<f64>,
    pub f_code: Array1<f64>,
    pub f_depth: Array1<f64>,
    pub f_parent: Array1<f64>,
    pub f_child: Array1<f64>,
    pub nodes: Vec<NodeTokens>,
    pub diagnostics: Diagnostics,
}

impl CharPrototype {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.f_code.len()
    }

    /// Rounds every vector to binary32 precision.
    pub fn quantize(&mut self) {
        let q = |a: &mut Array1<f64>| a.mapv_inplace(|x| x as f32 as f64);
        for a in [
            &mut self.v_ent,
            &mut self.f_code,
            &mut self.f_depth,
            &mut self.f_parent,
            &mut self.f_child,
        ] {
            q(a);
        }
        for n in &mut self.nodes {
            for a in [&mut n.v, &mut n.code, &mut n.depth, &mut n.parent, &mut n.child] {
                q(a);
            }
        }
    }
}

/// Position-table-independent part of a prototype.
///
/// `v_i` is linear in `p_i`, so training keeps `H_i e_i` here and forms the
/// entropy tokens from the current position table on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralPrior {
    pub label: String,
    /// `H(r_i) · e_i` per leaf.
    pub weighted_code: Vec<Array1<f64>>,
    pub nodes: Vec<NodeFeatures>,
    pub f_code: Array1<f64>,
    pub f_depth: Array1<f64>,
    pub f_parent: Array1<f64>,
    pub f_child: Array1<f64>,
    pub diagnostics: Diagnostics,
}

const NORM_FLOOR: f64 = 1e-8;

impl StructuralPrior {
    pub fn encode(
        label: impl Into<String>,
        tree: &RadicalTree,
        codebook: &EmbeddingCodebook,
        ptable: &PositionTable,
        etable: &EntropyTable,
    ) -> Result<Self, StructureError> {
        let dim = codebook.dim();
        check_dim(dim)?;
        if ptable.dim() != dim {
            return Err(StructureError::DimensionMismatch {
                expected: dim,
                found: ptable.dim(),
            });
        }
        let leaves = tree.root.leaves();
        let depth_norm = tree.max_depth.max(1) as f64;
        let mut diagnostics = Diagnostics::default();

        let mut nodes = Vec::with_capacity(leaves.len());
        let mut sum_parent = Array1::<f64>::zeros(dim);
        let mut sum_child = Array1::<f64>::zeros(dim);
        for (i, leaf) in leaves.iter().enumerate() {
            let NodeContent::Radical(radical) = leaf.content else {
                unreachable!("leaves carry radicals")
            };
            let e = codebook.get(radical)?.to_owned();
            let look = etable.entropy(radical);
            diagnostics.smoothed_entropy |= look.smoothed;
            let position = i + 1;
            let p = ptable.get(position)?;
            let dp = dp_embedding(leaf.depth, leaf.pos, dim)?;
            let dp_p = dp_parent(leaf, dim)?;
            let dp_c = dp_child(leaf, dim)?;
            sum_parent += &dp_p;
            sum_child += &dp_c;
            nodes.push(NodeFeatures {
                depth: leaf.depth,
                pos: leaf.pos,
                position,
                entropy: look.entropy,
                v: entropy_token(e.view(), p, look.entropy),
                depth_tok: &e * (leaf.depth as f64 / depth_norm),
                parent_tok: &dp_p * &e,
                child_tok: &dp_c * &e,
                code: e,
                dp,
                dp_parent: dp_p,
                dp_child: dp_c,
            });
        }

        let norm_of = |s: &Array1<f64>, flag: &mut bool| {
            let n = s.dot(s).sqrt();
            if n < NORM_FLOOR {
                *flag = true;
                1.0
            } else {
                n
            }
        };
        let parent_norm = norm_of(&sum_parent, &mut diagnostics.degenerate_parent_norm);
        let child_norm = norm_of(&sum_child, &mut diagnostics.degenerate_child_norm);
        for n in &mut nodes {
            n.parent_tok /= parent_norm;
            n.child_tok /= child_norm;
        }

        let len = nodes.len() as f64;
        let sum = |f: &dyn Fn(&NodeFeatures) -> &Array1<f64>| {
            let mut acc = Array1::<f64>::zeros(dim);
            for n in &nodes {
                acc += f(n);
            }
            acc
        };
        let f_code = sum(&|n| &n.code) / len;
        let f_depth = sum(&|n| &n.depth_tok);
        let f_parent = sum(&|n| &n.parent_tok);
        let f_child = sum(&|n| &n.child_tok);
        let weighted_code = nodes.iter().map(|n| &n.code * n.entropy).collect();
        Ok(Self {
            label: label.into(),
            weighted_code,
            nodes,
            f_code,
            f_depth,
            f_parent,
            f_child,
            diagnostics,
        })
    }

    pub fn dim(&self) -> usize {
        self.f_code.len()
    }

    /// Entropy tokens `v_i` under `ptable`.
    pub fn entropy_tokens(&self, ptable: &PositionTable) -> Result<Vec<Array1<f64>>, StructureError> {
        self.weighted_code
            .iter()
            .enumerate()
            .map(|(i, w)| Ok(w * &ptable.get(i + 1)?))
            .collect()
    }

    pub fn prototype(&self, ptable: &PositionTable) -> Result<CharPrototype, StructureError> {
        let vs = self.entropy_tokens(ptable)?;
        let mut v_ent = Array1::<f64>::zeros(self.dim());
        for v in &vs {
            v_ent += v;
        }
        v_ent /= vs.len() as f64;
        let nodes = self
            .nodes
            .iter()
            .zip(vs)
            .map(|(n, v)| NodeTokens {
                v,
                code: n.code.clone(),
                depth: n.depth_tok.clone(),
                parent: n.parent_tok.clone(),
                child: n.child_tok.clone(),
            })
            .collect();
        Ok(CharPrototype {
            label: self.label.clone(),
            v_ent,
            f_code: self.f_code.clone(),
            f_depth: self.f_depth.clone(),
            f_parent: self.f_parent.clone(),
            f_child: self.f_child.clone(),
            nodes,
            diagnostics: self.diagnostics,
        })
    }
}

/// Five global vectors plus per-leaf tokens for one class.
pub fn encode_prototype(
    label: impl Into<String>,
    tree: &RadicalTree,
    codebook: &EmbeddingCodebook,
    ptable: &PositionTable,
    etable: &EntropyTable,
) -> Result<CharPrototype, StructureError> {
    StructuralPrior::encode(label, tree, codebook, ptable, etable)?.prototype(ptable)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CodebookMeta {
    pub seed: u64,
    pub table_digest: u64,
    pub vocab_digest: u64,
}

pub fn vocab_digest(vocab: &RadicalVocab) -> u64 {
    let mut h = Sha256::new();
    for s in vocab.symbols() {
        h.update((*s as u32).to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

/// Offline store of class prototypes, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeCodebook {
    dim: usize,
    entries: Vec<CharPrototype>,
    index: HashMap<String, usize>,
    pub meta: CodebookMeta,
}

const META_LABEL: &str = "__meta__";

impl PrototypeCodebook {
    pub fn new(dim: usize, entries: Vec<CharPrototype>, meta: CodebookMeta) -> Result<Self, StructureError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, p) in entries.iter().enumerate() {
            if p.dim() != dim {
                return Err(StructureError::DimensionMismatch {
                    expected: dim,
                    found: p.dim(),
                });
            }
            if index.insert(p.label.clone(), i).is_some() {
                return Err(StructureError::DuplicateLabel(p.label.clone()));
            }
        }
        Ok(Self {
            dim,
            entries,
            index,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CharPrototype] {
        &self.entries
    }

    pub fn get(&self, label: &str) -> Option<&CharPrototype> {
        self.index.get(label).map(|&i| &self.entries[i])
    }

    /// Restricts to `labels`, in the order given. Unknown labels are skipped.
    pub fn subset<S: AsRef<str>>(&self, labels: &[S]) -> Self {
        let entries: Vec<_> = labels.iter().filter_map(|l| self.get(l.as_ref()).cloned()).collect();
        Self::new(self.dim, entries, self.meta).expect("labels of a valid codebook are unique")
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.dim);
        c.push(
            META_LABEL,
            Entry::Meta {
                seed: self.meta.seed,
                table_digest: self.meta.table_digest,
                vocab_digest: self.meta.vocab_digest,
            },
        );
        let f32s = |a: &Array1<f64>, out: &mut Vec<f32>| out.extend(a.iter().map(|&x| x as f32));
        for p in &self.entries {
            let mut globals = Vec::with_capacity(5 * self.dim);
            for a in [&p.v_ent, &p.f_code, &p.f_depth, &p.f_parent, &p.f_child] {
                f32s(a, &mut globals);
            }
            let mut node_data = Vec::with_capacity(5 * self.dim * p.len());
            for n in &p.nodes {
                for a in [&n.v, &n.code, &n.depth, &n.parent, &n.child] {
                    f32s(a, &mut node_data);
                }
            }
            c.push(
                p.label.clone(),
                Entry::Prototype {
                    globals,
                    nodes: p.len(),
                    node_data,
                },
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, StructureError> {
        let dim = c.dim;
        let mut meta = CodebookMeta::default();
        let mut entries = Vec::new();
        let vec_at =
            |xs: &[f32], i: usize| -> Array1<f64> { xs[i * dim..(i + 1) * dim].iter().map(|&x| x as f64).collect() };
        for (label, entry) in &c.entries {
            match entry {
                Entry::Meta {
                    seed,
                    table_digest,
                    vocab_digest,
                } if label == META_LABEL => {
                    meta = CodebookMeta {
                        seed: *seed,
                        table_digest: *table_digest,
                        vocab_digest: *vocab_digest,
                    }
                }
                Entry::Prototype {
                    globals,
                    nodes,
                    node_data,
                } => {
                    let node_tokens = (0..*nodes)
                        .map(|j| NodeTokens {
                            v: vec_at(node_data, 5 * j),
                            code: vec_at(node_data, 5 * j + 1),
                            depth: vec_at(node_data, 5 * j + 2),
                            parent: vec_at(node_data, 5 * j + 3),
                            child: vec_at(node_data, 5 * j + 4),
                        })
                        .collect();
                    entries.push(CharPrototype {
                        label: label.clone(),
                        v_ent: vec_at(globals, 0),
                        f_code: vec_at(globals, 1),
                        f_depth: vec_at(globals, 2),
                        f_parent: vec_at(globals, 3),
                        f_child: vec_at(globals, 4),
                        nodes: node_tokens,
                        diagnostics: Diagnostics::default(),
                    });
                }
                _ => {
                    return Err(ContainerError::FormatVersionMismatch(format!(
                        "unexpected entry {label:?} in prototype codebook"
                    ))
                    .into())
                }
            }
        }
        Self::new(dim, entries, meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StructureError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self, StructureError> {
        let c = Container::load(path)?;
        if let Some(expected) = expected_dim {
            if expected != c.dim {
                return Err(StructureError::DimensionMismatch { expected, found: c.dim });
            }
        }
        Self::from_container(&c)
    }
}

/// Encodes every class and freezes the result at binary32 precision, which
/// is what the container stores.
pub fn build_codebook(
    corpus: &[(String, RadicalTree)],
    codebook: &EmbeddingCodebook,
    ptable: &PositionTable,
    etable: &EntropyTable,
    par: Parallelism,
) -> Result<PrototypeCodebook, StructureError> {
    if corpus.is_empty() {
        return Err(StructureError::EmptyCorpus);
    }
    let mut seen = std::collections::HashSet::with_capacity(corpus.len());
    for (label, _) in corpus {
        if !seen.insert(label.as_str()) {
            return Err(StructureError::DuplicateLabel(label.clone()));
        }
    }
    let entries = par
        .map(corpus, |(label, tree)| {
            let mut p = encode_prototype(label.clone(), tree, codebook, ptable, etable)?;
            p.quantize();
            Ok(p)
        })
        .into_iter()
        .collect::<Result<Vec<_>, StructureError>>()?;
    let meta = CodebookMeta {
        seed: codebook.seed(),
        table_digest: etable.digest(),
        vocab_digest: vocab_digest(&codebook.vocab()),
    };
    PrototypeCodebook::new(codebook.dim(), entries, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_codebook;
    use crate::entropy::build_entropy_table;
    use crate::ids::{parse_ids, Pos};

    #[test]
    fn dp_root_values() {
        let dp = dp_embedding(0, Pos::Root, 512).unwrap();
        assert_eq!(dp[0], 0.0);
        assert!((dp[128] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dp_left_depth_one_collides_with_root() {
        for dim in [2, 8, 32, 512] {
            let root = dp_embedding(0, Pos::Root, dim).unwrap();
            let left = dp_embedding(1, Pos::Left, dim).unwrap();
            assert_eq!(root, left);
        }
    }

    #[test]
    fn dp_right_depth_one() {
        let dp = dp_embedding(1, Pos::Right, 512).unwrap();
        assert!((dp[64] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dp_errors() {
        assert!(matches!(
            dp_embedding(1, Pos::Root, 8),
            Err(StructureError::InvalidPos { depth: 1, pos: 0 })
        ));
        assert!(matches!(
            dp_embedding(0, Pos::Left, 8),
            Err(StructureError::InvalidPos { .. })
        ));
        assert!(matches!(
            dp_embedding(0, Pos::Root, 7),
            Err(StructureError::OddDimension(7))
        ));
    }

    fn leaf(depth: u32, pos: Pos) -> TreeNode {
        TreeNode {
            content: NodeContent::Op(crate::ids::StructOp::Overlay),
            depth,
            pos,
            children: vec![],
        }
    }

    #[test]
    fn dp_parent_guards() {
        let root = leaf(0, Pos::Root);
        assert_eq!(dp_parent(&root, 16).unwrap(), dp_embedding(0, Pos::Root, 16).unwrap());
        let n = leaf(2, Pos::Right);
        let got = dp_parent(&n, 512).unwrap();
        let dp = dp_embedding(2, Pos::Right, 512).unwrap();
        assert!((got[64] - (dp[64] + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn dp_child_guards() {
        let l = leaf(1, Pos::Left);
        assert_eq!(dp_child(&l, 16).unwrap(), dp_embedding(1, Pos::Left, 16).unwrap());
    }

    #[test]
    fn entropy_token_cases() {
        let e = ndarray::arr1(&[1.0, 2.0]);
        let p = ndarray::arr1(&[3.0, 4.0]);
        assert_eq!(entropy_token(e.view(), p.view(), 0.5), ndarray::arr1(&[1.5, 4.0]));
        assert_eq!(entropy_token(e.view(), p.view(), 0.0), ndarray::arr1(&[0.0, 0.0]));
        let ones = ndarray::arr1(&[1.0, 1.0]);
        assert_eq!(entropy_token(e.view(), ones.view(), 1.0), e);
    }

    #[test]
    fn single_radical_prototype() {
        let vocab = RadicalVocab::from_symbols("ab".chars());
        let corpus = [parse_ids("a", &vocab).unwrap(), parse_ids("b", &vocab).unwrap()];
        let etable = build_entropy_table(&corpus).unwrap();
        let cb = init_codebook(&vocab, 8, 1).unwrap();
        let pt = PositionTable::init(4, 8, 1);
        let p = encode_prototype("a", &corpus[0], &cb, &pt, &etable).unwrap();
        let e = cb.get(vocab.get('a').unwrap()).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.f_depth.iter().all(|&x| x == 0.0));
        let dp = dp_embedding(0, Pos::Root, 8).unwrap();
        let want = &(&dp * &e) / dp.dot(&dp).sqrt();
        for (a, b) in p.f_parent.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let want_v = &e * &(&pt.get(1).unwrap() * 2f64.ln());
        for (a, b) in p.v_ent.iter().zip(want_v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn build_rejects_duplicates_and_empty() {
        let vocab = RadicalVocab::from_symbols("ab".chars());
        let t = parse_ids("a", &vocab).unwrap();
        let etable = build_entropy_table(std::slice::from_ref(&t)).unwrap();
        let cb = init_codebook(&vocab, 8, 1).unwrap();
        let pt = PositionTable::init(4, 8, 1);
        let dup = vec![("x".to_string(), t.clone()), ("x".to_string(), t)];
        assert!(matches!(
            build_codebook(&dup, &cb, &pt, &etable, Parallelism::Sequential),
            Err(StructureError::DuplicateLabel(_))
        ));
        assert!(matches!(
            build_codebook(&[], &cb, &pt, &etable, Parallelism::Sequential),
            Err(StructureError::EmptyCorpus)
        ));
    }

    #[test]
    fn position_dim_must_match() {
        let vocab = RadicalVocab::from_symbols("a".chars());
        let t = parse_ids("a", &vocab).unwrap();
        let etable = build_entropy_table(std::slice::from_ref(&t)).unwrap();
        let cb = init_codebook(&vocab, 8, 1).unwrap();
        let pt = PositionTable::init(4, 6, 1);
        assert!(matches!(
            encode_prototype("a", &t, &cb, &pt, &etable),
            Err(StructureError::DimensionMismatch { expected: 8, found: 6 })
        ));
    }
}
