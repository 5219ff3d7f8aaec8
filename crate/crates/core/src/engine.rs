//! End-to-end pipeline: corpus → index build, and question → retrieve →
//! prompt → complete → parse → attribute.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::corpus::{
    self, ChunkPolicy, CorpusError, CorpusFilter, Document, FieldMap, Reject,
};
use crate::embed::{embed_batch, EmbedError, EmbedderConfig, EmbedderDescriptor, EmbedderKind};
use crate::events::{attach_sources, parse_events, EventError, InvalidEvent, PoliticalEvent};
use crate::index::{
    write_atomic, ChunkStore, IndexError, RetrievalHit, SharedHandle, SourceRef, VectorIndex,
};
use crate::llm::{LlmBackend, LlmError};
use crate::prompt::{render, PromptError, PromptTemplate, DEFAULT_BUDGET_CHARS};

pub const INDEX_FILE: &str = "index.pevi";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const META_FILE: &str = "meta.json";
pub const REJECTS_FILE: &str = "rejects.jsonl";

const REMOTE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("cannot query an empty index")]
    QueryOnEmptyIndex,
    #[error("index was built with embedder {index:?}, but the configured embedder is {configured:?}")]
    EmbedderMismatch {
        index: Box<EmbedderDescriptor>,
        configured: Box<EmbedderDescriptor>,
    },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("invalid index metadata {path}: {message}")]
    Meta { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EngineError {
    /// Failures reaching or being refused by a remote endpoint.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            EngineError::Llm(
                LlmError::Transport { .. } | LlmError::Endpoint { .. } | LlmError::Timeout
            ) | EngineError::Embed(
                EmbedError::Transport(_) | EmbedError::Endpoint { .. } | EmbedError::Timeout
            )
        )
    }
}

/// Corpus ingestion settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub field_map: FieldMap,
    pub filter: CorpusFilter,
    pub chunk: ChunkPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k: usize,
    pub budget_chars: usize,
    pub attribution: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 5,
            budget_chars: DEFAULT_BUDGET_CHARS,
            attribution: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.k == 0 {
            return Err(EngineError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sidecar describing how an index was built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub embedder: EmbedderDescriptor,
    pub documents: usize,
    pub chunks: usize,
    pub generation: u64,
}

/// Everything a query needs, swapped as one unit on refresh.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub index: VectorIndex,
    pub chunks: ChunkStore,
    pub meta: IndexMeta,
}

impl KnowledgeBase {
    pub fn load(dir: &Path) -> Result<KnowledgeBase, EngineError> {
        let meta_path = dir.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path)?;
        let meta: IndexMeta = serde_json::from_str(&meta_text).map_err(|e| EngineError::Meta {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        let index = VectorIndex::load(&dir.join(INDEX_FILE))?;
        let chunks = ChunkStore::load(&dir.join(CHUNKS_FILE))?;
        if index.len() != meta.chunks || chunks.len() != meta.chunks {
            return Err(EngineError::Meta {
                path: meta_path,
                message: format!(
                    "metadata lists {} chunks, index has {}, sidecar has {}",
                    meta.chunks,
                    index.len(),
                    chunks.len()
                ),
            });
        }
        if let (Some(expected), Some(actual)) = (meta.embedder.dim, index.dim()) {
            if expected != actual {
                return Err(EngineError::Meta {
                    path: meta_path,
                    message: format!("metadata dim {expected} but index dim {actual}"),
                });
            }
        }
        Ok(KnowledgeBase {
            index,
            chunks,
            meta,
        })
    }

    /// Writes index, sidecar and metadata. Metadata goes last, so a directory
    /// with `meta.json` is always complete; on failure written files are removed.
    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        fs::create_dir_all(dir)?;
        let result = (|| -> Result<(), EngineError> {
            self.index.save(&dir.join(INDEX_FILE))?;
            self.chunks.save(&dir.join(CHUNKS_FILE))?;
            let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
            write_atomic(&dir.join(META_FILE), |w| w.write_all(&meta))?;
            Ok(())
        })();
        if result.is_err() {
            for name in [INDEX_FILE, CHUNKS_FILE, META_FILE] {
                let _ = fs::remove_file(dir.join(name));
            }
        }
        result
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub records_read: usize,
    pub rejected_lines: usize,
    pub rejected_records: usize,
    pub filtered_out: usize,
    pub documents: usize,
    pub chunks: usize,
    pub dim: usize,
}

#[derive(Debug)]
pub struct BuildOutput {
    pub knowledge: KnowledgeBase,
    pub documents: Vec<Document>,
    pub rejects: Vec<Reject>,
    pub report: BuildReport,
}

fn embed_all(texts: &[String], embedder: &EmbedderConfig) -> Result<Vec<crate::embed::EmbeddingVector>, EmbedError> {
    match embedder.kind {
        EmbedderKind::Local => embed_batch(texts, embedder),
        EmbedderKind::Remote => {
            let mut out = Vec::with_capacity(texts.len());
            for batch in texts.chunks(REMOTE_BATCH) {
                out.extend(embed_batch(batch, embedder)?);
            }
            Ok(out)
        }
    }
}

/// Ingests, filters, chunks and embeds a corpus into an in-memory knowledge base.
pub fn build_knowledge(
    corpus_path: &Path,
    corpus: &CorpusConfig,
    embedder: &EmbedderConfig,
) -> Result<BuildOutput, EngineError> {
    embedder.validate()?;
    let parsed = corpus::read_corpus(corpus_path, &corpus.field_map)?;
    let normalized = corpus::normalize_filter(&parsed.records, &corpus.filter)?;
    if normalized.documents.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let chunks = corpus::chunk_documents(&normalized.documents, corpus.chunk)?;

    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embed_all(&texts, embedder)?;
    let mut index = VectorIndex::new();
    for (chunk, vector) in chunks.iter().zip(&vectors) {
        index.upsert(&chunk.chunk_id, vector)?;
    }
    let dim = index.dim().unwrap_or(0);

    let mut descriptor = embedder.descriptor();
    descriptor.dim = Some(dim);
    let store = ChunkStore::from_chunks(&chunks, &normalized.documents);

    // Normalization rejects are numbered by record position; map them back to
    // source lines.
    let mut rejects = parsed.rejects.clone();
    rejects.extend(normalized.rejects.iter().map(|r| Reject {
        line: parsed.lines.get(r.line - 1).copied().unwrap_or(r.line),
        reason: r.reason.clone(),
    }));

    let report = BuildReport {
        records_read: parsed.records.len(),
        rejected_lines: parsed.rejects.len(),
        rejected_records: normalized.rejects.len(),
        filtered_out: normalized.filtered_out,
        documents: normalized.documents.len(),
        chunks: chunks.len(),
        dim,
    };
    info!(?report, "built knowledge base");
    Ok(BuildOutput {
        knowledge: KnowledgeBase {
            meta: IndexMeta {
                embedder: descriptor,
                documents: normalized.documents.len(),
                chunks: chunks.len(),
                generation: index.generation(),
            },
            index,
            chunks: store,
        },
        documents: normalized.documents,
        rejects,
        report,
    })
}

/// Builds and writes `index.pevi`, `chunks.jsonl`, `meta.json` and
/// `rejects.jsonl` under `out_dir`.
pub fn build(
    corpus_path: &Path,
    corpus: &CorpusConfig,
    embedder: &EmbedderConfig,
    out_dir: &Path,
) -> Result<BuildOutput, EngineError> {
    let output = build_knowledge(corpus_path, corpus, embedder)?;
    output.knowledge.save(out_dir)?;
    write_atomic(&out_dir.join(REJECTS_FILE), |w| {
        for reject in &output.rejects {
            serde_json::to_writer(&mut *w, reject)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(output)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed: Duration,
    pub retrieve: Duration,
    pub prompt: Duration,
    pub complete: Duration,
    pub parse: Duration,
}

/// Result of one question, with every intermediate kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub events: Vec<PoliticalEvent>,
    pub invalid: Vec<InvalidEvent>,
    /// Retrieved passages, best first (at most `k`).
    pub hits: Vec<RetrievalHit>,
    /// Passages that made it into the prompt, in tag order.
    pub context_ids: Vec<String>,
    pub raw_text: String,
    /// Set when the model output could not be parsed.
    pub warning: Option<String>,
    pub generation: u64,
    pub timings: StageTimings,
}

impl Answer {
    /// Documents backing the events, in first-cited order without repeats.
    pub fn attributions(&self) -> Vec<(&str, &SourceRef)> {
        let mut seen: Vec<&str> = Vec::new();
        let mut out = Vec::new();
        for event in &self.events {
            for chunk_id in &event.sources {
                if seen.contains(&chunk_id.as_str()) {
                    continue;
                }
                if let Some(hit) = self.hits.iter().find(|h| &h.chunk_id == chunk_id) {
                    seen.push(chunk_id);
                    out.push((chunk_id.as_str(), &hit.source));
                }
            }
        }
        out
    }
}

pub struct Engine {
    knowledge: SharedHandle<KnowledgeBase>,
    embedder: EmbedderConfig,
    llm: LlmBackend,
    template: PromptTemplate,
    config: EngineConfig,
}

impl Engine {
    pub fn new(
        knowledge: KnowledgeBase,
        embedder: EmbedderConfig,
        llm: LlmBackend,
        template: PromptTemplate,
        config: EngineConfig,
    ) -> Result<Engine, EngineError> {
        config.validate()?;
        embedder.validate()?;
        Ok(Engine {
            knowledge: SharedHandle::new(knowledge),
            embedder,
            llm,
            template,
            config,
        })
    }

    pub fn open(
        dir: &Path,
        embedder: EmbedderConfig,
        llm: LlmBackend,
        template: PromptTemplate,
        config: EngineConfig,
    ) -> Result<Engine, EngineError> {
        Engine::new(KnowledgeBase::load(dir)?, embedder, llm, template, config)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn knowledge(&self) -> Arc<KnowledgeBase> {
        self.knowledge.snapshot()
    }

    /// Installs a replacement knowledge base. Queries already running finish
    /// against the one they started with.
    pub fn install(&self, mut next: KnowledgeBase) -> Arc<KnowledgeBase> {
        let current = self.knowledge.snapshot();
        let generation = next.index.generation().max(current.meta.generation + 1);
        next.meta.generation = generation;
        self.knowledge.swap(next)
    }

    pub fn answer_query(&self, question: &str) -> Result<Answer, EngineError> {
        let question = question.trim();
        if question.is_empty() {
            return Err(EngineError::EmptyQuestion);
        }
        let knowledge = self.knowledge.snapshot();
        if knowledge.index.is_empty() {
            return Err(EngineError::QueryOnEmptyIndex);
        }
        let configured = self.embedder.descriptor();
        if !configured.compatible_with(&knowledge.meta.embedder) {
            return Err(EngineError::EmbedderMismatch {
                index: Box::new(knowledge.meta.embedder.clone()),
                configured: Box::new(configured),
            });
        }
        let mut timings = StageTimings::default();

        let started = Instant::now();
        let query = embed_batch(&[question.to_owned()], &self.embedder)?
            .pop()
            .ok_or_else(|| EmbedError::Protocol("no vector for question".into()))?;
        timings.embed = started.elapsed();

        let started = Instant::now();
        let neighbors = knowledge.index.search(&query, self.config.k)?;
        let hits = knowledge.chunks.resolve(neighbors)?;
        timings.retrieve = started.elapsed();

        let started = Instant::now();
        let prompt = render(&self.template, question, &hits, self.config.budget_chars)?;
        timings.prompt = started.elapsed();

        let started = Instant::now();
        let response = self.llm.complete(&prompt)?;
        timings.complete = started.elapsed();

        let started = Instant::now();
        let included = &hits[..prompt.context.len()];
        let (events, invalid, warning) = match parse_events(&response.text) {
            Ok(result) => {
                let result = if self.config.attribution {
                    attach_sources(result, included)
                } else {
                    result
                };
                (result.events, result.invalid, None)
            }
            Err(err @ EventError::Parse { .. }) => {
                debug!(%err, "unparseable model output");
                (Vec::new(), Vec::new(), Some(err.to_string()))
            }
        };
        timings.parse = started.elapsed();

        Ok(Answer {
            question: question.to_owned(),
            events,
            invalid,
            context_ids: prompt.context.iter().map(|c| c.chunk_id.clone()).collect(),
            hits,
            raw_text: response.text,
            warning,
            generation: knowledge.meta.generation,
            timings,
        })
    }
}
