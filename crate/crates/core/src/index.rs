//! Exact top-k cosine index over chunk vectors, its on-disk format, and the
//! chunk-text sidecar that resolves search results back to their sources.
//!
//! # File layout (little-endian)
//!
//! ```text
//! magic    b"PEVI"        4 bytes
//! version  u16 = 1
//! dim      u32
//! count    u64
//! count × { id_len u16 | id (UTF-8) | dim × f32 }
//! crc32    u32            over every preceding byte
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, Document};
use crate::embed::{dot_unchecked, EmbedError, EmbeddingVector};

pub const MAGIC: [u8; 4] = *b"PEVI";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, vector has {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("invalid index file: {0}")]
    Format(String),
    #[error("invalid chunk sidecar: {0}")]
    Sidecar(String),
    #[error("chunk id longer than {} bytes", u16::MAX)]
    IdTooLong,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_err(msg: impl Into<String>) -> IndexError {
    IndexError::Format(msg.into())
}

/// A chunk id with its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub chunk_id: String,
    pub score: f64,
}

/// Where a chunk came from, for attribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub doc_id: String,
    pub headline: String,
    pub link: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f64,
    pub text: String,
    pub source: SourceRef,
}

/// In-memory exact cosine index.
///
/// Vectors live in one flat buffer; `positions` maps ids to rows. Every
/// mutation bumps `generation`.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    dim: Option<usize>,
    ids: Vec<String>,
    data: Vec<f32>,
    positions: HashMap<String, usize>,
    generation: u64,
}

/// Heap entry ordered so that the *worst* candidate is the maximum.
struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

impl Candidate<'_> {
    /// `Less` when `self` ranks before `other`: higher score, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty index with a fixed dimension.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            ..Self::default()
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.positions.contains_key(chunk_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    pub fn get(&self, chunk_id: &str) -> Option<&[f32]> {
        let dim = self.dim?;
        let row = *self.positions.get(chunk_id)?;
        Some(&self.data[row * dim..(row + 1) * dim])
    }

    fn check_dim(&self, actual: usize) -> Result<(), IndexError> {
        match self.dim {
            Some(expected) if expected != actual => Err(IndexError::Dim { expected, actual }),
            _ => Ok(()),
        }
    }

    fn insert_row(&mut self, chunk_id: &str, vector: &EmbeddingVector) {
        let dim = *self.dim.get_or_insert(vector.dim());
        match self.positions.get(chunk_id) {
            Some(&row) => self.data[row * dim..(row + 1) * dim].copy_from_slice(vector.values()),
            None => {
                self.positions.insert(chunk_id.to_owned(), self.ids.len());
                self.ids.push(chunk_id.to_owned());
                self.data.extend_from_slice(vector.values());
            }
        }
    }

    /// Inserts or replaces the vector for `chunk_id`. The first insert fixes
    /// the index dimension.
    pub fn upsert(&mut self, chunk_id: &str, vector: &EmbeddingVector) -> Result<(), IndexError> {
        self.check_dim(vector.dim())?;
        self.insert_row(chunk_id, vector);
        self.generation += 1;
        Ok(())
    }

    /// Similarity of every stored vector to `query`, in storage order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<Neighbor>, IndexError> {
        let Some(dim) = self.dim else {
            return Ok(Vec::new());
        };
        self.check_dim(query.dim())?;
        Ok(self
            .ids
            .iter()
            .zip(self.data.chunks_exact(dim))
            .map(|(id, row)| Neighbor {
                chunk_id: id.clone(),
                score: dot_unchecked(query.values(), row),
            })
            .collect())
    }

    /// Exact top-`k` by cosine, best first; equal scores order by chunk id.
    /// An empty index yields no hits.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Neighbor>, IndexError> {
        let Some(dim) = self.dim else {
            return Ok(Vec::new());
        };
        self.check_dim(query.dim())?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for (id, row) in self.ids.iter().zip(self.data.chunks_exact(dim)) {
            let candidate = Candidate {
                score: dot_unchecked(query.values(), row),
                id,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if heap.peek().is_some_and(|worst| candidate < *worst) {
                heap.pop();
                heap.push(candidate);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                chunk_id: c.id.to_owned(),
                score: c.score,
            })
            .collect())
    }

    /// Builds a complete replacement index from `entries`. The current index
    /// is untouched; the replacement's generation is strictly greater.
    pub fn refresh<I>(&self, entries: I) -> Result<VectorIndex, IndexError>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let mut next = VectorIndex {
            dim: self.dim,
            ..Self::default()
        };
        for (id, vector) in entries {
            next.check_dim(vector.dim())?;
            next.insert_row(&id, &vector);
        }
        next.generation = self.generation + 1;
        Ok(next)
    }

    fn sorted_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.ids.len()).collect();
        rows.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        rows
    }

    /// Serializes the index; entries are written in chunk-id order.
    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        let dim = self.dim.unwrap_or(0);
        let dim_u32 = u32::try_from(dim).map_err(|_| format_err("dimension exceeds u32"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.ids.len() * (dim * 4 + 18) + CRC_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&dim_u32.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for row in self.sorted_rows() {
            let id = self.ids[row].as_bytes();
            let id_len = u16::try_from(id.len()).map_err(|_| IndexError::IdTooLong)?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(id);
            for value in &self.data[row * dim..(row + 1) * dim] {
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses bytes written by [`VectorIndex::to_bytes`]. Any truncation,
    /// corruption or trailing garbage is a [`IndexError::Format`].
    pub fn from_bytes(bytes: &[u8]) -> Result<VectorIndex, IndexError> {
        if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
            return Err(format_err("bad magic"));
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(format_err("truncated header"));
        }
        let (payload, crc_bytes) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored_crc {
            return Err(format_err("checksum mismatch (truncated or corrupted)"));
        }

        let mut reader = ByteReader::new(&payload[4..]);
        let version = reader.u16()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let dim = reader.u32()? as usize;
        let count = reader.u64()?;
        if count > 0 && dim == 0 {
            return Err(format_err("entries present but dimension is zero"));
        }
        let mut index = VectorIndex::default();
        if dim > 0 {
            index.dim = Some(dim);
        }
        for _ in 0..count {
            let id_len = reader.u16()? as usize;
            let id = std::str::from_utf8(reader.take(id_len)?)
                .map_err(|_| format_err("chunk id is not UTF-8"))?
                .to_owned();
            let raw = reader.take(dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let vector = EmbeddingVector::from_unit(values)
                .map_err(|e: EmbedError| format_err(format!("entry {id:?}: {e}")))?;
            if index.contains(&id) {
                return Err(format_err(format!("duplicate chunk id {id:?}")));
            }
            index.insert_row(&id, &vector);
        }
        if !reader.is_empty() {
            return Err(format_err("trailing bytes after last entry"));
        }
        Ok(index)
    }

    /// Writes the index atomically (temporary file in the same directory, then rename).
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<VectorIndex, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.bytes.len() < n {
            return Err(format_err("unexpected end of data"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Writes through a temporary file next to `path` and renames it into place.
pub(crate) fn write_atomic<F>(path: &Path, write: F) -> Result<(), IndexError>
where
    F: FnOnce(&mut BufWriter<&mut fs::File>) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        write(&mut writer)?;
        writer.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| IndexError::Io(e.error))?;
    Ok(())
}

/// A value that readers snapshot and a writer replaces wholesale.
///
/// Readers hold an `Arc` to the generation they started with, so a swap never
/// changes data under a running search.
#[derive(Debug)]
pub struct SharedHandle<T> {
    current: RwLock<Arc<T>>,
}

pub type SharedIndex = SharedHandle<VectorIndex>;

impl<T> SharedHandle<T> {
    pub fn new(value: T) -> Self {
        Self {
            current: RwLock::new(Arc::new(value)),
        }
    }

    pub fn snapshot(&self) -> Arc<T> {
        Arc::clone(&self.current.read().unwrap_or_else(|p| p.into_inner()))
    }

    /// Installs `next` and returns the previous value.
    pub fn swap(&self, next: T) -> Arc<T> {
        let mut guard = self.current.write().unwrap_or_else(|p| p.into_inner());
        std::mem::replace(&mut *guard, Arc::new(next))
    }
}

/// One line of the chunk sidecar. `headline` and `link` are carried so hits
/// can be attributed without the original corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredChunk {
    pub chunk_id: String,
    pub doc_ref: String,
    pub text: String,
    #[serde(default)]
    pub headline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
}

/// Chunk texts and their document provenance, keyed by chunk id.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: Vec<StoredChunk>,
    by_id: HashMap<String, usize>,
}

impl ChunkStore {
    pub fn from_chunks(chunks: &[Chunk], docs: &[Document]) -> Self {
        let docs: HashMap<&str, &Document> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
        let mut store = ChunkStore::default();
        for chunk in chunks {
            let doc = docs.get(chunk.doc_ref.as_str());
            store.insert(StoredChunk {
                chunk_id: chunk.chunk_id.clone(),
                doc_ref: chunk.doc_ref.clone(),
                text: chunk.text.clone(),
                headline: doc.map(|d| d.headline.clone()).unwrap_or_default(),
                link: doc.and_then(|d| d.source_link.clone()),
            });
        }
        store
    }

    pub fn insert(&mut self, chunk: StoredChunk) {
        match self.by_id.get(&chunk.chunk_id) {
            Some(&i) => self.chunks[i] = chunk,
            None => {
                self.by_id.insert(chunk.chunk_id.clone(), self.chunks.len());
                self.chunks.push(chunk);
            }
        }
    }

    pub fn get(&self, chunk_id: &str) -> Option<&StoredChunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredChunk> {
        self.chunks.iter()
    }

    /// Attaches text and provenance to search results.
    pub fn resolve(&self, neighbors: Vec<Neighbor>) -> Result<Vec<RetrievalHit>, IndexError> {
        neighbors
            .into_iter()
            .map(|n| {
                let chunk = self.get(&n.chunk_id).ok_or_else(|| {
                    IndexError::Sidecar(format!("no text stored for chunk {:?}", n.chunk_id))
                })?;
                Ok(RetrievalHit {
                    source: SourceRef {
                        doc_id: chunk.doc_ref.clone(),
                        headline: chunk.headline.clone(),
                        link: chunk.link.clone(),
                    },
                    chunk_id: n.chunk_id,
                    score: n.score,
                    text: chunk.text.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, |w| {
            for chunk in &self.chunks {
                serde_json::to_writer(&mut *w, chunk)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<ChunkStore, IndexError> {
        let reader = io::BufReader::new(fs::File::open(path)?);
        let mut store = ChunkStore::default();
        for (number, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: StoredChunk = serde_json::from_str(&line)
                .map_err(|e| IndexError::Sidecar(format!("line {}: {e}", number + 1)))?;
            store.insert(chunk);
        }
        Ok(store)
    }
}
