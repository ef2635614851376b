// SPDX-License-Identifier: Apache-2.0

//! Radical occurrence statistics and per-radical information entropy.
//!
//! Counts are taken over every leaf slot of every tree, so a radical used
//! twice in one character contributes two occurrences. Entropy is
//! `H(r) = -ln P(r)` in nats.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{RadicalId, RadicalTree};
use crate::parallel::Parallelism;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("cannot build an entropy table from an empty corpus")]
    EmptyCorpus,
    #[error("failed to write {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEntry {
    pub radical: RadicalId,
    pub count: u64,
    pub prob: f64,
    pub entropy: f64,
}

/// Entropy lookup result. `smoothed` marks radicals absent from the corpus,
/// whose value comes from add-one smoothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyLookup {
    pub entropy: f64,
    pub smoothed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTable {
    entries: BTreeMap<u32, EntropyEntry>,
    total: u64,
}

impl EntropyTable {
    /// Builds a table from raw occurrence counts. Zero counts are dropped.
    pub fn from_counts<I: IntoIterator<Item = (RadicalId, u64)>>(counts: I) -> Result<Self, EntropyError> {
        let mut merged: BTreeMap<u32, (RadicalId, u64)> = BTreeMap::new();
        for (r, n) in counts {
            if n > 0 {
                merged.entry(r.index).or_insert((r, 0)).1 += n;
            }
        }
        let total: u64 = merged.values().map(|(_, n)| n).sum();
        if total == 0 {
            return Err(EntropyError::EmptyCorpus);
        }
        let entries = merged
            .into_iter()
            .map(|(idx, (radical, count))| {
                let prob = count as f64 / total as f64;
                (
                    idx,
                    EntropyEntry {
                        radical,
                        count,
                        prob,
                        entropy: 0.0 - prob.ln(),
                    },
                )
            })
            .collect();
        Ok(Self { entries, total })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, radical: RadicalId) -> Option<&EntropyEntry> {
        self.entries.get(&radical.index)
    }

    /// Entries in vocabulary index order.
    pub fn entries(&self) -> impl Iterator<Item = &EntropyEntry> {
        self.entries.values()
    }

    /// Entropy of `radical`; radicals never counted get
    /// `-ln(1 / (total + M))` with `M` the number of counted radicals.
    pub fn entropy(&self, radical: RadicalId) -> EntropyLookup {
        match self.entries.get(&radical.index) {
            Some(e) => EntropyLookup {
                entropy: e.entropy,
                smoothed: false,
            },
            None => EntropyLookup {
                entropy: ((self.total + self.entries.len() as u64) as f64).ln(),
                smoothed: true,
            },
        }
    }

    /// Stable digest of (index, symbol, count) triples.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        for e in self.entries.values() {
            h.update(e.radical.index.to_le_bytes());
            h.update((e.radical.symbol as u32).to_le_bytes());
            h.update(e.count.to_le_bytes());
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Writes `radical,index,count,prob,entropy_nats`, rows by descending
    /// entropy then ascending index.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&EntropyEntry> = self.entries.values().collect();
        rows.sort_by(|a, b| {
            b.entropy
                .total_cmp(&a.entropy)
                .then(a.radical.index.cmp(&b.radical.index))
        });
        let mut out = String::from("radical,index,count,prob,entropy_nats\n");
        for e in rows {
            let sym = match e.radical.symbol {
                ',' | '"' => format!("\"{}\"", e.radical.symbol.to_string().replace('"', "\"\"")),
                c => c.to_string(),
            };
            out.push_str(&format!(
                "{sym},{},{},{:.6},{:.6}\n",
                e.radical.index, e.count, e.prob, e.entropy
            ));
        }
        out
    }
}

fn count_leaves(trees: &[RadicalTree]) -> BTreeMap<u32, (RadicalId, u64)> {
    let mut counts = BTreeMap::new();
    for t in trees {
        for r in &t.leaf_sequence {
            counts.entry(r.index).or_insert((*r, 0)).1 += 1;
        }
    }
    counts
}

const SHARD: usize = 256;

/// Counts leaf occurrences over the corpus and derives P and H.
pub fn build_entropy_table(corpus: &[RadicalTree]) -> Result<EntropyTable, EntropyError> {
    build_entropy_table_with(corpus, Parallelism::Sequential)
}

/// Shard-parallel variant; integer counts merge exactly, so the table is
/// identical to the sequential one.
pub fn build_entropy_table_with(corpus: &[RadicalTree], par: Parallelism) -> Result<EntropyTable, EntropyError> {
    if corpus.is_empty() {
        return Err(EntropyError::EmptyCorpus);
    }
    let shards = par.map_chunks(corpus, SHARD, count_leaves);
    let merged = shards.into_iter().flat_map(|s| s.into_values());
    EntropyTable::from_counts(merged)
}

pub fn export_entropy_csv(table: &EntropyTable, path: impl AsRef<Path>) -> Result<(), EntropyError> {
    let path = path.as_ref();
    let io = |source| EntropyError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(table.to_csv().as_bytes()).map_err(io)?;
    Ok(())
}
