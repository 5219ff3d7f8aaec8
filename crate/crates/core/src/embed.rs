//! Text embedding: a deterministic hashed bag-of-features embedder for offline
//! use, a client for OpenAI-compatible `/v1/embeddings` endpoints, and cosine
//! similarity over unit-norm vectors.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{self, HttpError};

/// Default dimension of the local embedder.
pub const DEFAULT_DIM: usize = 1024;

/// Identifies the local feature-hashing scheme. Bumped whenever tokenization,
/// hashing or weighting change, so that indexes built with an older scheme are
/// refused.
pub const LOCAL_EMBEDDER_VERSION: &str = "fnv1a64-uni-bi-logtf-v1";

/// Allowed deviation of a vector's Euclidean norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text contains no tokens")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("vector is not unit norm (norm = {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("vector has zero norm or non-finite components")]
    Degenerate,
    #[error("embedder misconfigured: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<HttpError> for EmbedError {
    fn from(err: HttpError) -> Self {
        match err {
            HttpError::Timeout => EmbedError::Timeout,
            HttpError::Connect(msg) | HttpError::Transport(msg) => EmbedError::Transport(msg),
            HttpError::Status { status, body } => EmbedError::Endpoint { status, body },
            HttpError::Decode(msg) => EmbedError::Protocol(msg),
        }
    }
}

/// A dense vector with Euclidean norm 1 (within [`NORM_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wraps values that are already unit norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = l2_norm(values.iter().map(|&v| v as f64));
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::NotUnitNorm { norm });
        }
        Ok(Self { values })
    }

    /// Scales arbitrary values to unit norm.
    pub fn normalized<I>(values: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator,
        I::Item: Into<f64>,
    {
        let raw: Vec<f64> = values.into_iter().map(Into::into).collect();
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = l2_norm(raw.iter().copied());
        if norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        Self::from_unit(raw.iter().map(|v| (v / norm) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

fn l2_norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::Dim {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot_unchecked(a.values(), b.values()))
}

/// Dot product of equal-length slices, accumulated in f64 and clamped to `[-1, 1]`.
///
/// Multiplication commutes per term and the summation order is fixed, so the
/// result is exactly symmetric in its arguments.
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    dot.clamp(-1.0, 1.0)
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Unigrams followed by adjacent bigrams (joined by a single space).
pub fn features(tokens: &[String]) -> Vec<String> {
    let bigrams = tokens.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    tokens.iter().cloned().chain(bigrams).collect()
}

/// Deterministic hashed bag-of-features embedding.
///
/// Each distinct feature contributes `1 + ln(count)` to bucket
/// `fnv1a64(feature) mod dim`; the bucket vector is then L2-normalized.
pub fn embed_local(text: &str, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::Config("dimension must be positive".into()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut counts: HashMap<String, u32> = HashMap::new();
    for feature in features(&tokens) {
        *counts.entry(feature).or_default() += 1;
    }
    // Colliding features share a bucket; sort so their f64 sum has a fixed order.
    let mut sorted: Vec<(String, u32)> = counts.into_iter().collect();
    sorted.sort_unstable();

    let mut buckets = vec![0f64; dim];
    for (feature, count) in sorted {
        let bucket = (fnv1a64(feature.as_bytes()) % dim as u64) as usize;
        buckets[bucket] += 1.0 + (count as f64).ln();
    }
    EmbeddingVector::normalized(buckets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Output dimension for the local embedder; for a remote endpoint the
    /// dimension is whatever the model returns.
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Local,
            dim: DEFAULT_DIM,
            endpoint: None,
            model: None,
            timeout_secs: 30.0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        match self.kind {
            EmbedderKind::Local if self.dim == 0 => {
                Err(EmbedError::Config("local embedder needs dim > 0".into()))
            }
            EmbedderKind::Remote if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                Err(EmbedError::Config("remote embedder requires an endpoint".into()))
            }
            _ if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 => {
                Err(EmbedError::Config("timeout must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Identity recorded in index metadata; two embedders with equal
    /// descriptors produce comparable vectors.
    pub fn descriptor(&self) -> EmbedderDescriptor {
        match self.kind {
            EmbedderKind::Local => EmbedderDescriptor {
                kind: EmbedderKind::Local,
                dim: Some(self.dim),
                version: LOCAL_EMBEDDER_VERSION.to_owned(),
                model: None,
            },
            EmbedderKind::Remote => EmbedderDescriptor {
                kind: EmbedderKind::Remote,
                dim: None,
                version: "openai-embeddings".to_owned(),
                model: self.model.clone(),
            },
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub kind: EmbedderKind,
    /// Fixed up front for local embedders; discovered from the first response
    /// for remote ones.
    pub dim: Option<usize>,
    pub version: String,
    pub model: Option<String>,
}

impl EmbedderDescriptor {
    /// Whether vectors from `self` can be compared against an index built by `other`.
    pub fn compatible_with(&self, other: &EmbedderDescriptor) -> bool {
        self.kind == other.kind
            && self.version == other.version
            && self.model == other.model
            && match (self.dim, other.dim) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: Option<usize>,
    embedding: Vec<f64>,
}

/// Calls `<endpoint>/v1/embeddings` and returns one unit vector per input text,
/// in input order.
pub fn embed_remote(
    texts: &[String],
    config: &EmbedderConfig,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if config.kind != EmbedderKind::Remote {
        return Err(EmbedError::Config("embed_remote needs kind = remote".into()));
    }
    config.validate()?;
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let endpoint = config.endpoint.as_deref().unwrap_or_default();
    let url = http::join_url(endpoint, "/v1/embeddings");
    let body = serde_json::to_value(EmbeddingsRequest {
        model: config.model.as_deref(),
        input: texts,
    })
    .map_err(|e| EmbedError::Protocol(e.to_string()))?;

    let client = http::client(config.timeout())?;
    let response: EmbeddingsResponse = http::post_json(&client, &url, &body)?;

    if response.data.len() != texts.len() {
        return Err(EmbedError::Protocol(format!(
            "requested {} embeddings, received {}",
            texts.len(),
            response.data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
    for (position, datum) in response.data.into_iter().enumerate() {
        let index = datum.index.unwrap_or(position);
        match slots.get_mut(index) {
            Some(slot @ None) => *slot = Some(datum.embedding),
            Some(Some(_)) => {
                return Err(EmbedError::Protocol(format!("duplicate embedding index {index}")))
            }
            None => return Err(EmbedError::Protocol(format!("embedding index {index} out of range"))),
        }
    }
    let mut out = Vec::with_capacity(texts.len());
    for raw in slots.into_iter().flatten() {
        let vector = EmbeddingVector::normalized(raw)
            .map_err(|e| EmbedError::Protocol(format!("unusable embedding: {e}")))?;
        if let Some(first) = out.first().map(EmbeddingVector::dim) {
            if vector.dim() != first {
                return Err(EmbedError::Protocol("embeddings of differing dimension".into()));
            }
        }
        out.push(vector);
    }
    Ok(out)
}

/// Embeds a batch of texts with whichever embedder `config` selects.
pub fn embed_batch(
    texts: &[String],
    config: &EmbedderConfig,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    match config.kind {
        EmbedderKind::Local => texts.iter().map(|t| embed_local(t, config.dim)).collect(),
        EmbedderKind::Remote => embed_remote(texts, config),
    }
}
