// SPDX-License-Identifier: Apache-2.0

//! Binary vector container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EASA" | version u16 | dim u32 | count u32 | entry*
//! entry := label_len u16 | label (UTF-8) | kind u8 | payload
//! kind 1: dim f32                              single vector
//! kind 2: rows u32 | rows*dim f32              row-major matrix
//! kind 3: seed u64 | digest u64 | digest u64   build metadata
//! kind 5: 5*dim f32 | L u16 | L*5*dim f32      prototype + node tokens
//! ```
//!
//! Vectors are stored as IEEE-754 binary32.

use std::fs;
use std::io::{self, Cursor, Read};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EASA";
pub const FORMAT_VERSION: u16 = 1;

pub const KIND_VECTOR: u8 = 1;
pub const KIND_MATRIX: u8 = 2;
pub const KIND_META: u8 = 3;
pub const KIND_PROTOTYPE: u8 = 5;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("unsupported container: {0}")]
    FormatVersionMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Vector(Vec<f32>),
    Matrix {
        rows: usize,
        data: Vec<f32>,
    },
    Meta {
        seed: u64,
        table_digest: u64,
        vocab_digest: u64,
    },
    /// Five global vectors followed by `L` rows of five node vectors.
    Prototype {
        globals: Vec<f32>,
        nodes: usize,
        node_data: Vec<f32>,
    },
}

impl Entry {
    pub fn kind(&self) -> u8 {
        match self {
            Entry::Vector(_) => KIND_VECTOR,
            Entry::Matrix { .. } => KIND_MATRIX,
            Entry::Meta { .. } => KIND_META,
            Entry::Prototype { .. } => KIND_PROTOTYPE,
        }
    }

    /// Serialized size in bytes, excluding the label header.
    pub fn payload_len(&self, dim: usize) -> usize {
        match self {
            Entry::Vector(_) => 4 * dim,
            Entry::Matrix { rows, .. } => 4 + 4 * rows * dim,
            Entry::Meta { .. } => 24,
            Entry::Prototype { nodes, .. } => 4 * 5 * dim + 2 + 4 * 5 * nodes * dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dim: usize,
    pub entries: Vec<(String, Entry)>,
}

/// Fixed header length: magic, version, dim, count.
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4;

impl Container {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, entry: Entry) {
        self.entries.push((label.into(), entry));
    }

    pub fn get(&self, label: &str) -> Option<&Entry> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, e)| e)
    }

    /// Exact file size implied by the entries.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|(l, e)| 2 + l.len() + 1 + e.payload_len(self.dim))
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (label, entry) in &self.entries {
            out.extend_from_slice(&(label.len() as u16).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
            out.push(entry.kind());
            match entry {
                Entry::Vector(v) => put(&mut out, v),
                Entry::Matrix { rows, data } => {
                    out.extend_from_slice(&(*rows as u32).to_le_bytes());
                    put(&mut out, data);
                }
                Entry::Meta {
                    seed,
                    table_digest,
                    vocab_digest,
                } => {
                    out.extend_from_slice(&seed.to_le_bytes());
                    out.extend_from_slice(&table_digest.to_le_bytes());
                    out.extend_from_slice(&vocab_digest.to_le_bytes());
                }
                Entry::Prototype {
                    globals,
                    nodes,
                    node_data,
                } => {
                    put(&mut out, globals);
                    out.extend_from_slice(&(*nodes as u16).to_le_bytes());
                    put(&mut out, node_data);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let eof = |source: io::Error| ContainerError::IoFailure {
            path: "<bytes>".into(),
            source,
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(ContainerError::FormatVersionMismatch("bad magic".into()));
        }
        let version = read_u16(&mut r).map_err(eof)?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::FormatVersionMismatch(format!(
                "version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let dim = read_u32(&mut r).map_err(eof)? as usize;
        let count = read_u32(&mut r).map_err(eof)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u16(&mut r).map_err(eof)? as usize;
            let mut label = vec![0u8; len];
            r.read_exact(&mut label).map_err(eof)?;
            let label = String::from_utf8(label)
                .map_err(|_| ContainerError::FormatVersionMismatch("label is not UTF-8".into()))?;
            let mut kind = [0u8];
            r.read_exact(&mut kind).map_err(eof)?;
            let entry = match kind[0] {
                KIND_VECTOR => Entry::Vector(read_f32s(&mut r, dim).map_err(eof)?),
                KIND_MATRIX => {
                    let rows = read_u32(&mut r).map_err(eof)? as usize;
                    Entry::Matrix {
                        rows,
                        data: read_f32s(&mut r, rows * dim).map_err(eof)?,
                    }
                }
                KIND_META => Entry::Meta {
                    seed: read_u64(&mut r).map_err(eof)?,
                    table_digest: read_u64(&mut r).map_err(eof)?,
                    vocab_digest: read_u64(&mut r).map_err(eof)?,
                },
                KIND_PROTOTYPE => {
                    let globals = read_f32s(&mut r, 5 * dim).map_err(eof)?;
                    let nodes = read_u16(&mut r).map_err(eof)? as usize;
                    Entry::Prototype {
                        globals,
                        nodes,
                        node_data: read_f32s(&mut r, nodes * 5 * dim).map_err(eof)?,
                    }
                }
                k => {
                    return Err(ContainerError::FormatVersionMismatch(format!(
                        "unknown payload kind {k}"
                    )))
                }
            };
            entries.push((label, entry));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(ContainerError::FormatVersionMismatch(
                "trailing bytes after last entry".into(),
            ));
        }
        Ok(Self { dim, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ContainerError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ContainerError::IoFailure { source, .. } => ContainerError::IoFailure {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// JSON-lines mirror of the binary content, one entry per line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            label: &'a str,
            kind: u8,
            dim: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            rows: Option<usize>,
            #[serde(skip_serializing_if = "Option::is_none")]
            values: Option<&'a [f32]>,
            #[serde(skip_serializing_if = "Option::is_none")]
            node_values: Option<&'a [f32]>,
            #[serde(skip_serializing_if = "Option::is_none")]
            meta: Option<[u64; 3]>,
        }
        let mut out = String::new();
        for (label, e) in &self.entries {
            let mut line = Line {
                label,
                kind: e.kind(),
                dim: self.dim,
                rows: None,
                values: None,
                node_values: None,
                meta: None,
            };
            match e {
                Entry::Vector(v) => line.values = Some(v),
                Entry::Matrix { rows, data } => {
                    line.rows = Some(*rows);
                    line.values = Some(data);
                }
                Entry::Meta {
                    seed,
                    table_digest,
                    vocab_digest,
                } => line.meta = Some([*seed, *table_digest, *vocab_digest]),
                Entry::Prototype {
                    globals,
                    nodes,
                    node_data,
                } => {
                    line.rows = Some(*nodes);
                    line.values = Some(globals);
                    line.node_values = Some(node_data);
                }
            }
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut Cursor<&[u8]>, n: usize) -> io::Result<Vec<f32>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "container payload truncated",
        ));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

/// Narrows to binary32, the precision the container stores.
pub fn to_f32(xs: impl IntoIterator<Item = f64>) -> Vec<f32> {
    xs.into_iter().map(|x| x as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(2);
        c.push(
            "meta",
            Entry::Meta {
                seed: 7,
                table_digest: 1,
                vocab_digest: 2,
            },
        );
        c.push("a", Entry::Vector(vec![1.0, -2.5]));
        c.push(
            "Wq",
            Entry::Matrix {
                rows: 2,
                data: vec![1.0, 2.0, 3.0, 4.0],
            },
        );
        c.push(
            "深",
            Entry::Prototype {
                globals: (0..10).map(|x| x as f32).collect(),
                nodes: 1,
                node_data: (0..10).map(|x| -(x as f32)).collect(),
            },
        );
        c
    }

    #[test]
    fn header_bytes() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"EASA");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), sample().encoded_len());
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncation_never_yields_data() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let r = Container::from_bytes(&bytes[..cut]);
            assert!(
                matches!(
                    r,
                    Err(ContainerError::IoFailure { .. } | ContainerError::FormatVersionMismatch(_))
                ),
                "cut at {cut} gave {r:?}"
            );
        }
    }

    #[test]
    fn bad_version() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::FormatVersionMismatch(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::FormatVersionMismatch(_))
        ));
    }

    #[test]
    fn jsonl_has_one_line_per_entry() {
        let c = sample();
        let dump = c.to_jsonl();
        assert_eq!(dump.lines().count(), c.entries.len());
        let first: serde_json::Value = serde_json::from_str(dump.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first["label"], "a");
        assert_eq!(first["values"][1], -2.5);
    }

    proptest! {
        #[test]
        fn vectors_round_trip_bitwise(
            dim in 1usize..8,
            raw in proptest::collection::vec(proptest::num::f32::ANY, 0..64),
        ) {
            let mut c = Container::new(dim);
            for (i, chunk) in raw.chunks_exact(dim).enumerate() {
                c.push(format!("v{i}"), Entry::Vector(chunk.to_vec()));
            }
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.entries.len(), c.entries.len());
            for ((_, a), (_, b)) in c.entries.iter().zip(&back.entries) {
                let (Entry::Vector(a), Entry::Vector(b)) = (a, b) else { unreachable!() };
                let a: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = b.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
