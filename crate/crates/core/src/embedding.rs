// SPDX-License-Identifier: Apache-2.0

//! Radical semantic codebook `e_r` and the sequence-position table `p_i`.
//!
//! The default codebook holds seeded random unit vectors. Externally
//! produced vectors (for example from a text encoder) can be injected
//! through [`EmbeddingCodebook::load`].

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::container::{Container, ContainerError, Entry};
use crate::ids::{RadicalId, RadicalVocab};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("embedding dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("radical {0:?} has no embedding")]
    UnknownRadical(char),
    #[error("position {position} outside table of length {max_len}")]
    PositionOutOfRange { position: usize, max_len: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

const META_LABEL: &str = "__meta__";

/// Stream separation for the position table so it never reuses the
/// codebook's draws under the same seed.
const POSITION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Draws `n` standard normals, narrowed to binary32 so every value survives
/// a round trip through the container.
fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x as f32 as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCodebook {
    dim: usize,
    seed: u64,
    symbols: Vec<char>,
    vectors: Vec<Array1<f64>>,
}

impl EmbeddingCodebook {
    /// One seeded standard-normal vector per radical in vocabulary order,
    /// scaled to unit length.
    pub fn init(vocab: &RadicalVocab, dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if vocab.is_empty() {
            return Err(EmbeddingError::EmptyVocabulary);
        }
        if dim < 2 {
            return Err(EmbeddingError::DimensionTooSmall(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = vocab
            .symbols()
            .iter()
            .map(|_| {
                let raw = normals(&mut rng, dim);
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                raw.iter().map(|x| (x / norm) as f32 as f64).collect()
            })
            .collect();
        Ok(Self {
            dim,
            seed,
            symbols: vocab.symbols().to_vec(),
            vectors,
        })
    }

    /// Wraps externally produced vectors, one per vocabulary entry.
    pub fn from_vectors(vocab: &RadicalVocab, vectors: Vec<Array1<f64>>, seed: u64) -> Result<Self, EmbeddingError> {
        if vocab.is_empty() {
            return Err(EmbeddingError::EmptyVocabulary);
        }
        let dim = vectors.first().map_or(0, |v| v.len());
        if dim < 2 {
            return Err(EmbeddingError::DimensionTooSmall(dim));
        }
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(ContainerError::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            }
            .into());
        }
        if vectors.len() != vocab.len() {
            return Err(ContainerError::DimensionMismatch {
                expected: vocab.len(),
                found: vectors.len(),
            }
            .into());
        }
        Ok(Self {
            dim,
            seed,
            symbols: vocab.symbols().to_vec(),
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vocab(&self) -> RadicalVocab {
        RadicalVocab::from_symbols(self.symbols.iter().copied())
    }

    /// Looks up `e_r`. The id must match both index and symbol.
    pub fn get(&self, radical: RadicalId) -> Result<ArrayView1<'_, f64>, EmbeddingError> {
        match self.symbols.get(radical.index as usize) {
            Some(&s) if s == radical.symbol => Ok(self.vectors[radical.index as usize].view()),
            _ => Err(EmbeddingError::UnknownRadical(radical.symbol)),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.dim);
        c.push(
            META_LABEL,
            Entry::Meta {
                seed: self.seed,
                table_digest: 0,
                vocab_digest: 0,
            },
        );
        for (s, v) in self.symbols.iter().zip(&self.vectors) {
            c.push(s.to_string(), Entry::Vector(v.iter().map(|&x| x as f32).collect()));
        }
        c
    }

    pub fn from_container(c: &Container, expected_dim: Option<usize>) -> Result<Self, EmbeddingError> {
        if let Some(expected) = expected_dim {
            if expected != c.dim {
                return Err(ContainerError::DimensionMismatch { expected, found: c.dim }.into());
            }
        }
        let mut seed = 0;
        let mut symbols = Vec::new();
        let mut vectors = Vec::new();
        for (label, entry) in &c.entries {
            match entry {
                Entry::Meta { seed: s, .. } if label == META_LABEL => seed = *s,
                Entry::Vector(v) => {
                    let mut chars = label.chars();
                    let (Some(sym), None) = (chars.next(), chars.next()) else {
                        return Err(ContainerError::FormatVersionMismatch(format!(
                            "radical label {label:?} is not a single character"
                        ))
                        .into());
                    };
                    symbols.push(sym);
                    vectors.push(v.iter().map(|&x| x as f64).collect());
                }
                _ => {
                    return Err(ContainerError::FormatVersionMismatch(format!(
                        "unexpected entry {label:?} in radical codebook"
                    ))
                    .into())
                }
            }
        }
        if vectors.is_empty() {
            return Err(EmbeddingError::EmptyVocabulary);
        }
        Ok(Self {
            dim: c.dim,
            seed,
            symbols,
            vectors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self, EmbeddingError> {
        Self::from_container(&Container::load(path)?, expected_dim)
    }
}

pub fn init_codebook(vocab: &RadicalVocab, dim: usize, seed: u64) -> Result<EmbeddingCodebook, EmbeddingError> {
    EmbeddingCodebook::init(vocab, dim, seed)
}

pub const DEFAULT_MAX_LEN: usize = 32;

/// Learnable sequence-position rows `p_1 .. p_max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub rows: Array2<f64>,
    pub trainable: bool,
}

impl PositionTable {
    /// Seeded standard normals scaled by `1/sqrt(dim)`.
    pub fn init(max_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ POSITION_STREAM);
        let scale = 1.0 / (dim as f64).sqrt();
        let data = normals(&mut rng, max_len * dim)
            .into_iter()
            .map(|x| (x * scale) as f32 as f64)
            .collect();
        Self {
            rows: Array2::from_shape_vec((max_len, dim), data).expect("shape matches"),
            trainable: true,
        }
    }

    pub fn ones(max_len: usize, dim: usize) -> Self {
        Self {
            rows: Array2::ones((max_len, dim)),
            trainable: false,
        }
    }

    pub fn max_len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Row `p_i` for a 1-based sequence position.
    pub fn get(&self, position: usize) -> Result<ArrayView1<'_, f64>, EmbeddingError> {
        if position == 0 || position > self.max_len() {
            return Err(EmbeddingError::PositionOutOfRange {
                position,
                max_len: self.max_len(),
            });
        }
        Ok(self.rows.row(position - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> RadicalVocab {
        RadicalVocab::from_symbols((0..n).map(|i| char::from_u32(0x2F00 + i as u32).unwrap()))
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let v = RadicalVocab::from_symbols(['a']);
        let a = init_codebook(&v, 4, 7).unwrap();
        let b = init_codebook(&v, 4, 7).unwrap();
        assert_eq!(a, b);
        let v = vocab(20);
        let cb = init_codebook(&v, 32, 3).unwrap();
        for r in v.iter() {
            let e = cb.get(r).unwrap();
            assert!((e.dot(&e).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn near_orthogonal_at_dim_64() {
        let v = vocab(2);
        let cb = init_codebook(&v, 64, 7).unwrap();
        let a = cb.get(v.by_index(0).unwrap()).unwrap();
        let b = cb.get(v.by_index(1).unwrap()).unwrap();
        assert!(a.dot(&b).abs() < 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            init_codebook(&RadicalVocab::new(), 4, 0),
            Err(EmbeddingError::EmptyVocabulary)
        ));
        assert!(matches!(
            init_codebook(&vocab(1), 1, 0),
            Err(EmbeddingError::DimensionTooSmall(1))
        ));
        let cb = init_codebook(&vocab(2), 4, 0).unwrap();
        let stranger = RadicalId { symbol: 'x', index: 0 };
        assert!(matches!(cb.get(stranger), Err(EmbeddingError::UnknownRadical('x'))));
    }

    #[test]
    fn save_load_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rad.bin");
        let cb = init_codebook(&vocab(12), 32, 42).unwrap();
        cb.save(&path).unwrap();
        let back = EmbeddingCodebook::load(&path, Some(32)).unwrap();
        assert_eq!(back, cb);
        assert!(matches!(
            EmbeddingCodebook::load(&path, Some(512)),
            Err(EmbeddingError::Container(ContainerError::DimensionMismatch {
                expected: 512,
                found: 32
            }))
        ));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            EmbeddingCodebook::load(&path, None),
            Err(EmbeddingError::Container(
                ContainerError::IoFailure { .. } | ContainerError::FormatVersionMismatch(_)
            ))
        ));
    }

    #[test]
    fn position_table() {
        let p = PositionTable::init(32, 8, 1);
        assert_eq!(p, PositionTable::init(32, 8, 1));
        assert!(p.rows.iter().all(|x| x.is_finite()));
        assert!(p.get(1).is_ok() && p.get(32).is_ok());
        assert!(p.get(0).is_err() && p.get(33).is_err());
    }
}
