//! The key-value knowledge bank: paragraphs keyed by their embeddings, with
//! exact k-nearest-neighbor search under Euclidean distance.
//!
//! On disk a bank is a packed little-endian vector file plus a JSONL sidecar
//! holding the paragraphs (same schema as the input corpus) and a small JSON
//! metadata file recording the embedder tag.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder, EmbeddingVector};

pub const BANK_MAGIC: &[u8; 8] = b"ARRKB01\n";
const HEADER_LEN: usize = 8 + 4 + 8;
/// Banks at least this large are scanned in parallel.
const PARALLEL_SCAN_MIN: usize = 32_768;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate paragraph id {0}")]
    DuplicateId(u32),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("paragraph {0} has an empty body")]
    EmptyBody(u32),
    #[error("embedding paragraph {id} failed: {source}")]
    Embed { id: u32, source: EmbedError },
    #[error("embedder returned {got} keys for {expected} paragraphs")]
    KeyCount { expected: usize, got: usize },
    #[error("paragraph {id} embedded to dimension {got}, expected {expected}")]
    InconsistentDimension {
        id: u32,
        expected: usize,
        got: usize,
    },
    #[error("query dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("bad magic bytes {found:?} in bank file")]
    BadMagic { found: String },
    #[error("truncated bank file: header declares {count} records of dim {dim} ({expected} bytes) but file has {actual} bytes")]
    Truncated {
        dim: u32,
        count: u64,
        expected: u64,
        actual: u64,
    },
    #[error("bank file and sidecar disagree: {0}")]
    SidecarMismatch(String),
    #[error("bank entries must have strictly increasing ids (id {0} out of order)")]
    UnorderedIds(u32),
}

/// One knowledge-base unit: a law clause or a textbook paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: u32,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub source: String,
}

impl Paragraph {
    /// Text that is embedded to form the paragraph's key.
    pub fn key_text(&self) -> String {
        format!("{}\n{}", self.title, self.body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub paragraph_id: u32,
    pub distance: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBank {
    dim: usize,
    /// Row-major, `paragraphs.len() * dim` floats.
    keys: Vec<f32>,
    paragraphs: Vec<Paragraph>,
    embedder_tag: String,
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: Option<u32>,
    title: String,
    body: String,
    #[serde(default)]
    source: String,
}

/// Reads a JSONL corpus. Records without an `id` get their 0-based record
/// position as id. Blank lines are skipped.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Vec<Paragraph>, BankError> {
    let path = path.as_ref();
    let read_err = |source| BankError::Read {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(read_err)?);
    let mut paragraphs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| BankError::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        let id = match record.id {
            Some(id) => id,
            None => u32::try_from(paragraphs.len()).map_err(|_| BankError::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "too many records".into(),
            })?,
        };
        if record.body.is_empty() {
            return Err(BankError::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "empty body".into(),
            });
        }
        if !seen.insert(id) {
            return Err(BankError::DuplicateId(id));
        }
        paragraphs.push(Paragraph {
            id,
            title: record.title,
            body: record.body,
            source: record.source,
        });
    }
    if paragraphs.is_empty() {
        return Err(BankError::EmptyCorpus);
    }
    Ok(paragraphs)
}

pub fn write_corpus(path: impl AsRef<Path>, paragraphs: &[Paragraph]) -> Result<(), BankError> {
    let path = path.as_ref();
    let write_err = |source| BankError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(write_err)?);
    for p in paragraphs {
        let line = serde_json::to_string(p).expect("paragraph serializes");
        writeln!(w, "{line}").map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Distance candidate ordered by (squared distance, id).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    id: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

impl KnowledgeBank {
    /// Builds a bank from already-computed keys. Entries are put in
    /// ascending id order.
    pub fn from_parts(
        mut entries: Vec<(EmbeddingVector, Paragraph)>,
        embedder_tag: impl Into<String>,
    ) -> Result<Self, BankError> {
        if entries.is_empty() {
            return Err(BankError::EmptyCorpus);
        }
        entries.sort_by_key(|(_, p)| p.id);
        let dim = entries[0].0.dim();
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut paragraphs = Vec::with_capacity(entries.len());
        let mut last: Option<u32> = None;
        for (key, p) in entries {
            if last == Some(p.id) {
                return Err(BankError::DuplicateId(p.id));
            }
            if p.body.is_empty() {
                return Err(BankError::EmptyBody(p.id));
            }
            if key.dim() != dim {
                return Err(BankError::InconsistentDimension {
                    id: p.id,
                    expected: dim,
                    got: key.dim(),
                });
            }
            last = Some(p.id);
            keys.extend_from_slice(key.as_slice());
            paragraphs.push(p);
        }
        Ok(Self {
            dim,
            keys,
            paragraphs,
            embedder_tag: embedder_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn embedder_tag(&self) -> &str {
        &self.embedder_tag
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    pub fn paragraph(&self, id: u32) -> Option<&Paragraph> {
        self.paragraphs
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.paragraphs[i])
    }

    fn scan(
        &self,
        query: &[f32],
        k: usize,
        range: std::ops::Range<usize>,
    ) -> BinaryHeap<Candidate> {
        // Max-heap of the k best seen so far; the root is the current worst.
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for index in range {
            let c = Candidate {
                dist2: squared_l2(query, self.key(index)),
                id: self.paragraphs[index].id,
            };
            if heap.len() < k {
                heap.push(c);
            } else if let Some(worst) = heap.peek() {
                if c < *worst {
                    heap.pop();
                    heap.push(c);
                }
            }
        }
        heap
    }

    /// Exact k nearest neighbors of `query`, sorted by (distance, id).
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, BankError> {
        if k == 0 {
            return Err(BankError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(BankError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let q = query.as_slice();
        let n = self.len();
        let k = k.min(n);
        let mut best: Vec<Candidate> = if n >= PARALLEL_SCAN_MIN {
            let chunk = n.div_ceil(rayon::current_num_threads().max(1));
            (0..n)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| self.scan(q, k, start..(start + chunk).min(n)).into_vec())
                .flatten()
                .collect()
        } else {
            self.scan(q, k, 0..n).into_vec()
        };
        best.sort_unstable();
        best.truncate(k);
        Ok(best
            .into_iter()
            .enumerate()
            .map(|(i, c)| RetrievalHit {
                paragraph_id: c.id,
                distance: c.dist2.sqrt() as f32,
                rank: i + 1,
            })
            .collect())
    }

    /// Writes the vector file at `path`, the paragraph sidecar and the
    /// metadata file next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        let path = path.as_ref();
        let write_err = |source| BankError::Write {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 4 * self.dim));
        buf.extend_from_slice(BANK_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, p) in self.paragraphs.iter().enumerate() {
            buf.extend_from_slice(&p.id.to_le_bytes());
            for v in self.key(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, &buf).map_err(write_err)?;
        write_corpus(sidecar_path(path), &self.paragraphs)?;
        let meta = BankMeta {
            embedder_tag: self.embedder_tag.clone(),
            dim: self.dim,
            count: self.len(),
        };
        let meta_path = meta_path(path);
        fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )
        .map_err(|source| BankError::Write {
            path: meta_path.clone(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| BankError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let (dim, records) = decode_vector_file(&bytes)?;
        let paragraphs = match ingest_corpus(sidecar_path(path)) {
            Ok(p) => p,
            Err(BankError::EmptyCorpus) => Vec::new(),
            Err(e) => return Err(e),
        };
        if paragraphs.len() != records.len() {
            return Err(BankError::SidecarMismatch(format!(
                "vector file holds {} records, sidecar holds {} paragraphs",
                records.len(),
                paragraphs.len()
            )));
        }
        let mut keys = Vec::with_capacity(records.len() * dim);
        let mut last: Option<u32> = None;
        for ((id, key), p) in records.iter().zip(&paragraphs) {
            if *id != p.id {
                return Err(BankError::SidecarMismatch(format!(
                    "vector record id {id} paired with sidecar id {}",
                    p.id
                )));
            }
            if last.is_some_and(|l| l >= *id) {
                return Err(BankError::UnorderedIds(*id));
            }
            last = Some(*id);
            keys.extend_from_slice(key);
        }
        if paragraphs.is_empty() {
            return Err(BankError::EmptyCorpus);
        }
        let embedder_tag = fs::read_to_string(meta_path(path))
            .ok()
            .and_then(|s| serde_json::from_str::<BankMeta>(&s).ok())
            .map(|m| m.embedder_tag)
            .unwrap_or_else(|| "unknown".to_string());
        Ok(Self {
            dim,
            keys,
            paragraphs,
            embedder_tag,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    embedder_tag: String,
    dim: usize,
    count: usize,
}

pub fn sidecar_path(vector_path: &Path) -> PathBuf {
    let mut s = vector_path.as_os_str().to_owned();
    s.push(".paragraphs.jsonl");
    PathBuf::from(s)
}

pub fn meta_path(vector_path: &Path) -> PathBuf {
    let mut s = vector_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

type Record = (u32, Vec<f32>);

fn decode_vector_file(bytes: &[u8]) -> Result<(usize, Vec<Record>), BankError> {
    if bytes.len() < BANK_MAGIC.len() || &bytes[..8] != BANK_MAGIC {
        let found = &bytes[..bytes.len().min(8)];
        return Err(BankError::BadMagic {
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(BankError::Truncated {
            dim: 0,
            count: 0,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let record_len = 4u64 + 4 * u64::from(dim);
    let expected = count
        .checked_mul(record_len)
        .and_then(|b| b.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(BankError::Truncated {
            dim,
            count,
            expected: expected.unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    if dim == 0 {
        return Err(BankError::SidecarMismatch(
            "vector file declares dim 0".into(),
        ));
    }
    let records = bytes[HEADER_LEN..]
        .chunks_exact(record_len as usize)
        .map(|rec| {
            let id = u32::from_le_bytes(rec[..4].try_into().unwrap());
            let key = rec[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            (id, key)
        })
        .collect();
    Ok((dim as usize, records))
}

/// Embeds `title + "\n" + body` of every paragraph and packs the keys.
pub fn build_bank(
    paragraphs: Vec<Paragraph>,
    embedder: &dyn Embedder,
) -> Result<KnowledgeBank, BankError> {
    if paragraphs.is_empty() {
        return Err(BankError::EmptyCorpus);
    }
    let texts: Vec<String> = paragraphs.iter().map(Paragraph::key_text).collect();
    let keys = match embedder.embed_batch(&texts) {
        Ok(keys) => keys,
        // Re-run one at a time to name the failing paragraph.
        Err(batch_err) => {
            for (p, text) in paragraphs.iter().zip(&texts) {
                if let Err(source) = embedder.embed(text) {
                    return Err(BankError::Embed { id: p.id, source });
                }
            }
            return Err(BankError::Embed {
                id: paragraphs[0].id,
                source: batch_err,
            });
        }
    };
    if keys.len() != paragraphs.len() {
        return Err(BankError::KeyCount {
            expected: paragraphs.len(),
            got: keys.len(),
        });
    }
    KnowledgeBank::from_parts(keys.into_iter().zip(paragraphs).collect(), embedder.tag())
}

pub fn knn(
    bank: &KnowledgeBank,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<RetrievalHit>, BankError> {
    bank.knn(query, k)
}

pub fn save_bank(bank: &KnowledgeBank, path: impl AsRef<Path>) -> Result<(), BankError> {
    bank.save(path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<KnowledgeBank, BankError> {
    KnowledgeBank::load(path)
}
