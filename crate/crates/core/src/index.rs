//! Versioned, sharded passage-embedding store with exact top-K inner-product
//! search.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::Passage;
use crate::encoder::{self, EncoderError, EncoderParams, Mode, Side};
use crate::util::{read_f32s, read_u32, read_u64, write_f32s, write_u32, write_u64};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 4] = b"ARIX";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over zero passages")]
    Empty,
    #[error("shard count must be at least 1")]
    ZeroShards,
    #[error("encoding passage {id:?} failed: {source}")]
    Encode {
        id: String,
        #[source]
        source: EncoderError,
    },
    #[error("K={k} is outside 1..={m}")]
    BadK { k: usize, m: usize },
    #[error("query has dimension {found}, index has {expected}")]
    QueryDim { found: usize, expected: usize },
    #[error("index version must increase: published {published}, offered {offered}")]
    VersionRegression { published: u64, offered: u64 },
    #[error("index format: {0}")]
    Format(String),
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    /// First passage index covered by this shard.
    pub start: usize,
    /// Row-major `len × dim` block.
    pub rows: Vec<f32>,
}

impl Shard {
    pub fn len(&self, dim: usize) -> usize {
        self.rows.len() / dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub version: u64,
    pub dim: usize,
    pub len: usize,
    pub shards: Vec<Shard>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub index: usize,
    pub score: f64,
}

/// Ranked hits: scores non-increasing, ties by ascending passage index.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

impl SearchResult {
    pub fn indices(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.index).collect()
    }
}

/// Sizes of `num_shards` contiguous ranges covering `m` rows; the first
/// `m % num_shards` shards carry one extra row.
pub fn shard_sizes(m: usize, num_shards: usize) -> Vec<usize> {
    let base = m / num_shards;
    let extra = m % num_shards;
    (0..num_shards)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

fn rank_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.index.cmp(&b.index))
}

/// Single-precision dot product, summed left to right from `+0.0` so that
/// zero scores compare equal under `total_cmp`.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn encode_rows(passages: &[Passage], params: &EncoderParams) -> Result<Vec<Vec<f32>>, IndexError> {
    passages
        .par_iter()
        .map(|p| {
            encoder::encode(&p.encoder_input(), Side::Passage, params, Mode::Eval)
                .map(|e| e.0.iter().map(|&v| v as f32).collect())
                .map_err(|source| IndexError::Encode {
                    id: p.id.clone(),
                    source,
                })
        })
        .collect()
}

impl EmbeddingIndex {
    /// Encodes every passage with the passage tower in eval mode. The new
    /// index starts at version 1.
    pub fn build(
        passages: &[Passage],
        params: &EncoderParams,
        num_shards: usize,
    ) -> Result<Self, IndexError> {
        Self::build_versioned(passages, params, num_shards, 1)
    }

    fn build_versioned(
        passages: &[Passage],
        params: &EncoderParams,
        num_shards: usize,
        version: u64,
    ) -> Result<Self, IndexError> {
        if num_shards == 0 {
            return Err(IndexError::ZeroShards);
        }
        if passages.is_empty() {
            return Err(IndexError::Empty);
        }
        let rows = encode_rows(passages, params)?;
        Ok(Self::from_rows(&rows, num_shards, version))
    }

    pub fn from_rows(rows: &[Vec<f32>], num_shards: usize, version: u64) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut shards = Vec::with_capacity(num_shards);
        let mut start = 0;
        for size in shard_sizes(rows.len(), num_shards) {
            let block: Vec<f32> = rows[start..start + size].iter().flatten().copied().collect();
            shards.push(Shard { start, rows: block });
            start += size;
        }
        EmbeddingIndex {
            version,
            dim,
            len: rows.len(),
            shards,
        }
    }

    /// Re-encodes every passage with `params` into a new index one version
    /// ahead, keeping the shard layout.
    pub fn refresh(&self, passages: &[Passage], params: &EncoderParams) -> Result<Self, IndexError> {
        Self::build_versioned(passages, params, self.shards.len(), self.version + 1)
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    /// `(start, end)` of each shard.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        self.shards
            .iter()
            .map(|s| (s.start, s.start + s.len(self.dim)))
            .collect()
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let shard = self
            .shards
            .iter()
            .rev()
            .find(|s| s.start <= index)
            .expect("row index within range");
        let local = index - shard.start;
        &shard.rows[local * self.dim..(local + 1) * self.dim]
    }

    /// Exact top-K: each shard ranks its own rows, then the partial lists are
    /// merged.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult, IndexError> {
        if k == 0 || k > self.len {
            return Err(IndexError::BadK { k, m: self.len });
        }
        if query.len() != self.dim {
            return Err(IndexError::QueryDim {
                found: query.len(),
                expected: self.dim,
            });
        }
        let q: Vec<f32> = query.iter().map(|&v| v as f32).collect();
        let partials: Vec<Vec<SearchHit>> = self
            .shards
            .par_iter()
            .map(|shard| shard_top_k(shard, self.dim, &q, k))
            .collect();
        let mut merged: Vec<SearchHit> = partials.into_iter().flatten().collect();
        merged.sort_by(rank_order);
        merged.truncate(k);
        Ok(SearchResult { hits: merged })
    }

    /// Header `(magic, format, version, m, d, shard ranges)` then rows as LE
    /// `f32`, row-major.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        write_u32(&mut w, INDEX_FORMAT_VERSION)?;
        write_u64(&mut w, self.version)?;
        write_u64(&mut w, self.len as u64)?;
        write_u64(&mut w, self.dim as u64)?;
        write_u64(&mut w, self.shards.len() as u64)?;
        for (start, end) in self.ranges() {
            write_u64(&mut w, start as u64)?;
            write_u64(&mut w, end as u64)?;
        }
        for s in &self.shards {
            write_f32s(&mut w, &s.rows)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::Format("not an index file".into()));
        }
        let format = read_u32(&mut r)?;
        if format != INDEX_FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "format version {format}, expected {INDEX_FORMAT_VERSION}"
            )));
        }
        let version = read_u64(&mut r)?;
        let len = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut ranges = Vec::with_capacity(n);
        let mut expect = 0;
        for _ in 0..n {
            let start = read_u64(&mut r)? as usize;
            let end = read_u64(&mut r)? as usize;
            if start != expect || end < start {
                return Err(IndexError::Format("shard ranges do not partition rows".into()));
            }
            expect = end;
            ranges.push((start, end));
        }
        if expect != len {
            return Err(IndexError::Format("shard ranges do not cover all rows".into()));
        }
        let mut shards = Vec::with_capacity(n);
        for (start, end) in ranges {
            let rows = read_f32s(&mut r, (end - start) * dim)?;
            if rows.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Format("non-finite row".into()));
            }
            shards.push(Shard { start, rows });
        }
        Ok(EmbeddingIndex {
            version,
            dim,
            len,
            shards,
        })
    }
}

fn shard_top_k(shard: &Shard, dim: usize, q: &[f32], k: usize) -> Vec<SearchHit> {
    let mut hits: Vec<SearchHit> = shard
        .rows
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, row)| SearchHit {
            index: shard.start + i,
            score: f64::from(dot_f32(row, q)),
        })
        .collect();
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits
}

/// Published index handle. Readers take a snapshot `Arc` and keep using it
/// while a refresher swaps in the next version.
#[derive(Debug)]
pub struct IndexHandle {
    current: RwLock<Arc<EmbeddingIndex>>,
}

impl IndexHandle {
    pub fn new(index: EmbeddingIndex) -> Self {
        IndexHandle {
            current: RwLock::new(Arc::new(index)),
        }
    }

    pub fn snapshot(&self) -> Arc<EmbeddingIndex> {
        Arc::clone(&self.current.read().expect("index lock poisoned"))
    }

    pub fn publish(&self, next: EmbeddingIndex) -> Result<(), IndexError> {
        let mut guard = self.current.write().expect("index lock poisoned");
        if next.version <= guard.version {
            return Err(IndexError::VersionRegression {
                published: guard.version,
                offered: next.version,
            });
        }
        *guard = Arc::new(next);
        Ok(())
    }

    /// Builds the next version from `params` off to the side, then swaps it in.
    pub fn refresh(&self, passages: &[Passage], params: &EncoderParams) -> Result<u64, IndexError> {
        let next = self.snapshot().refresh(passages, params)?;
        let version = next.version;
        self.publish(next)?;
        Ok(version)
    }
}
