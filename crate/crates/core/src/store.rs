//! Exact cosine-similarity index with a checksummed binary file format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "RNRIDX\0\0"
//! version     u32
//! dim         u32
//! created_at  i64      unix seconds
//! tag_len     u32, then tag bytes (UTF-8 provider tag)
//! count       u64
//! count x { id_len u32, id bytes, dim x f32 }
//! crc32       u32      over every preceding byte
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::embed::{cosine_with_norms, EmbeddingVector};
use crate::pipeline::ScoredDoc;

const MAGIC: &[u8; 8] = b"RNRIDX\0\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("dimension mismatch: index has {index}, got {got}")]
    DimMismatch { index: usize, got: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("corrupt index: {field}: {detail}")]
    Corrupt { field: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Brute-force vector index. Immutable once built; safe to search from many threads.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    provider_tag: String,
    created_at: i64,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    seen: HashSet<String>,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.provider_tag == other.provider_tag
            && self.created_at == other.created_at
            && self.ids == other.ids
            && self.vectors == other.vectors
    }
}

impl VectorIndex {
    pub fn new(dim: usize, provider_tag: impl Into<String>, created_at: i64) -> Self {
        Self {
            dim,
            provider_tag: provider_tag.into(),
            created_at,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn insert(&mut self, chunk_id: impl Into<String>, v: EmbeddingVector) -> Result<(), StoreError> {
        let chunk_id = chunk_id.into();
        if v.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                index: self.dim,
                got: v.dim(),
            });
        }
        if !self.seen.insert(chunk_id.clone()) {
            return Err(StoreError::DuplicateId(chunk_id));
        }
        self.norms.push(v.norm());
        self.ids.push(chunk_id);
        self.vectors.push(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn created_at(&self) -> i64 {
        self.created_at
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.seen.contains(chunk_id)
    }

    /// Top `k` entries by cosine similarity; ties go to the smaller chunk id.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredDoc>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                index: self.dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (v, n))| (cosine_with_norms(query.values(), qn, v.values(), *n), i))
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(score, i)| ScoredDoc {
                chunk_id: self.ids[i].clone(),
                score,
                source_rewrite: 0,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * (16 + self.dim * 4));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.extend_from_slice(&(self.provider_tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.provider_tag.as_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.entries() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 4 {
            return Err(corrupt("crc32", "file shorter than checksum"));
        }
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(corrupt("magic", "not an rnr index file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt("version", format!("unsupported version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(corrupt("dim", "zero"));
        }
        let created_at = i64::from_le_bytes(r.take(8, "created_at")?.try_into().unwrap());
        let tag_len = r.u32("provider_tag")? as usize;
        let tag = std::str::from_utf8(r.take(tag_len, "provider_tag")?)
            .map_err(|e| corrupt("provider_tag", e.to_string()))?
            .to_string();
        let count = r.u64("entry_count")?;
        let per_entry_min = 4 + dim as u64 * 4;
        if count.saturating_mul(per_entry_min) > bytes.len() as u64 {
            return Err(corrupt("entry_count", format!("{count} entries cannot fit in file")));
        }
        let mut index = VectorIndex::new(dim, tag, created_at);
        for _ in 0..count {
            let id_len = r.u32("entry.id_len")? as usize;
            let id = std::str::from_utf8(r.take(id_len, "entry.id")?)
                .map_err(|e| corrupt("entry.id", e.to_string()))?
                .to_string();
            let raw = r.take(dim * 4, "entry.vector")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let v = EmbeddingVector::new(values).map_err(|e| corrupt("entry.vector", e.to_string()))?;
            index.insert(id, v).map_err(|e| corrupt("entry.id", e.to_string()))?;
        }
        let body_end = r.pos;
        let stored = r.u32("crc32")?;
        if r.pos != bytes.len() {
            return Err(corrupt("crc32", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(corrupt("crc32", format!("stored {stored:08x}, computed {actual:08x}")));
        }
        Ok(index)
    }

    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        field,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(field, format!("truncated at byte {}", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}
