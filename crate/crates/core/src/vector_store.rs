//! Exact cosine top-K index over demand/response embeddings, with a binary
//! on-disk format and an optional remote search adapter.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::EmbeddingVector;
use crate::retry::{with_retry, BackendError, RetryPolicy};

pub use crate::asr::Speaker as Persona;

const MAGIC: &[u8; 4] = b"CQVS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate entry id {0}")]
    DuplicateId(String),
    #[error("dimension mismatch: index has {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("not a vector index file (bad magic)")]
    BadMagic,
    #[error("unsupported index version {0}")]
    BadVersion(u32),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("remote search failed after {attempts} attempts: {source}")]
    Remote { source: BackendError, attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEntry {
    pub entry_id: String,
    pub text: String,
    pub persona: Persona,
    pub call_id: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchFilter {
    pub persona: Option<Persona>,
    pub exclude_call_id: Option<String>,
}

impl SearchFilter {
    pub fn persona(p: Persona) -> Self {
        Self {
            persona: Some(p),
            exclude_call_id: None,
        }
    }

    fn accepts(&self, e: &VectorEntry) -> bool {
        self.persona.is_none_or(|p| p == e.persona) && self.exclude_call_id.as_deref().is_none_or(|c| c != e.call_id)
    }
}

/// A hit together with the text and origin of the matched entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedHit {
    pub hit: SearchHit,
    pub call_id: String,
    pub text: String,
}

/// Anything that can answer a filtered top-K query with resolved hits.
pub trait CandidateSource: Send + Sync {
    fn retrieve(&self, query: &[f32], k: usize, filter: &SearchFilter) -> Result<Vec<ResolvedHit>, StoreError>;
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Cosine similarity in f64; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<VectorEntry>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
}

/// Brute-force index. Many readers, one writer.
#[derive(Debug)]
pub struct VectorStore {
    dim: usize,
    inner: RwLock<Inner>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: VectorEntry) -> Result<(), StoreError> {
        if entry.embedding.dim() != self.dim {
            return Err(StoreError::Dimension {
                expected: self.dim,
                got: entry.embedding.dim(),
            });
        }
        let mut inner = self.inner.write().expect("store lock");
        if inner.by_id.contains_key(&entry.entry_id) {
            return Err(StoreError::DuplicateId(entry.entry_id));
        }
        let idx = inner.entries.len();
        inner.by_id.insert(entry.entry_id.clone(), idx);
        inner.norms.push(norm(&entry.embedding.values));
        inner.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, entry_id: &str) -> Option<VectorEntry> {
        let inner = self.inner.read().expect("store lock");
        inner.by_id.get(entry_id).map(|&i| inner.entries[i].clone())
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> Vec<VectorEntry> {
        self.inner.read().expect("store lock").entries.clone()
    }

    /// Exact top-k by cosine; ties broken by ascending entry id.
    pub fn search(&self, query: &[f32], k: usize, filter: &SearchFilter) -> Result<Vec<SearchHit>, StoreError> {
        Ok(self
            .search_indices(query, k, filter)?
            .into_iter()
            .map(|(hit, _)| hit)
            .collect())
    }

    fn search_indices(
        &self,
        query: &[f32],
        k: usize,
        filter: &SearchFilter,
    ) -> Result<Vec<(SearchHit, usize)>, StoreError> {
        if query.len() != self.dim {
            return Err(StoreError::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        let inner = self.inner.read().expect("store lock");
        let qn = norm(query);
        let mut scored: Vec<(f64, usize)> = inner
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| filter.accepts(e))
            .map(|(i, e)| {
                let en = inner.norms[i];
                let s = if qn == 0.0 || en == 0.0 {
                    0.0
                } else {
                    (dot(query, &e.embedding.values) / (qn * en)).clamp(-1.0, 1.0)
                };
                (s, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| inner.entries[a.1].entry_id.cmp(&inner.entries[b.1].entry_id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (score, i))| {
                (
                    SearchHit {
                        entry_id: inner.entries[i].entry_id.clone(),
                        score,
                        rank: r + 1,
                    },
                    i,
                )
            })
            .collect())
    }

    /// Writes the index atomically (temp file, then rename).
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let inner = self.inner.read().expect("store lock");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(inner.entries.len() as u64).to_le_bytes());
        for e in &inner.entries {
            for s in [&e.entry_id, &e.text, &e.call_id, &e.embedding.model_tag] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            buf.push(match e.persona {
                Persona::Customer => 0,
                Persona::Agent => 1,
            });
            for v in &e.embedding.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&buf)?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }

    /// Reads an index; `expected_dim` rejects files built for another dim.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, StoreError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(StoreError::BadVersion(version));
        }
        let dim = r.u32()? as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(StoreError::Dimension { expected, got: dim });
            }
        }
        let count = r.u64()?;
        let store = VectorStore::new(dim);
        for _ in 0..count {
            let entry_id = r.string()?;
            let text = r.string()?;
            let call_id = r.string()?;
            let model_tag = r.string()?;
            let persona = match r.take(1)?[0] {
                0 => Persona::Customer,
                1 => Persona::Agent,
                b => return Err(StoreError::Corrupt(format!("persona byte {b}"))),
            };
            let raw = r.take(dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(VectorEntry {
                entry_id,
                text,
                persona,
                call_id,
                embedding: EmbeddingVector { values, model_tag },
            })?;
        }
        if r.pos != bytes.len() {
            return Err(StoreError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }
}

impl CandidateSource for VectorStore {
    fn retrieve(&self, query: &[f32], k: usize, filter: &SearchFilter) -> Result<Vec<ResolvedHit>, StoreError> {
        let hits = self.search_indices(query, k, filter)?;
        let inner = self.inner.read().expect("store lock");
        Ok(hits
            .into_iter()
            .map(|(hit, i)| ResolvedHit {
                hit,
                call_id: inner.entries[i].call_id.clone(),
                text: inner.entries[i].text.clone(),
            })
            .collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StoreError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, StoreError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| StoreError::Corrupt(e.to_string()))
    }
}

/// External search service speaking JSON:
/// `{query, k, filter}` → `{hits: [{entry_id, score, rank, call_id, text}]}`.
#[derive(Debug, Clone)]
pub struct RemoteSearch {
    pub endpoint: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

#[derive(Deserialize)]
struct RemoteHit {
    entry_id: String,
    score: f64,
    rank: usize,
    call_id: String,
    text: String,
}

#[derive(Deserialize)]
struct RemoteReply {
    hits: Vec<RemoteHit>,
}

impl CandidateSource for RemoteSearch {
    fn retrieve(&self, query: &[f32], k: usize, filter: &SearchFilter) -> Result<Vec<ResolvedHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        let body = serde_json::json!({ "query": query, "k": k, "filter": filter });
        let reply = with_retry(&self.retry, |_| {
            let bytes = crate::http::post_json(&self.endpoint, &body, self.timeout)?;
            let reply: RemoteReply =
                serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(format!("search reply: {e}")))?;
            let ok = reply.hits.len() <= k
                && reply.hits.iter().enumerate().all(|(i, h)| h.rank == i + 1)
                && reply.hits.windows(2).all(|w| w[0].score >= w[1].score);
            if ok {
                Ok(reply)
            } else {
                Err(BackendError::Malformed("hits are not a ranked top-k list".into()))
            }
        })
        .map_err(|(source, attempts)| StoreError::Remote { source, attempts })?
        .value;
        Ok(reply
            .hits
            .into_iter()
            .map(|h| ResolvedHit {
                hit: SearchHit {
                    entry_id: h.entry_id,
                    score: h.score,
                    rank: h.rank,
                },
                call_id: h.call_id,
                text: h.text,
            })
            .collect())
    }
}
