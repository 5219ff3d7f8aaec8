//! Retrieval-augmented extraction of political events from news corpora.
//!
//! The pipeline ingests a JSON-lines news corpus ([`corpus`]), embeds chunks
//! ([`embed`]) into an exact cosine index ([`index`]), wraps retrieved
//! passages in a prompt ([`prompt`]), asks a chat model or a scripted mock
//! ([`llm`]) for events, and parses and attributes them ([`events`]).
//! [`engine`] wires the stages together; [`eval`] scores the output against
//! a gold set.

pub mod corpus;
pub mod embed;
pub mod engine;
pub mod eval;
pub mod events;
pub mod http;
pub mod index;
pub mod llm;
pub mod prompt;

pub use corpus::{Chunk, CorpusFilter, Document, FieldMap, RawRecord};
pub use embed::{cosine, embed_local, EmbedderConfig, EmbeddingVector};
pub use engine::{Answer, CorpusConfig, Engine, EngineConfig, EngineError, KnowledgeBase};
pub use eval::{evaluate, EvalReport, GoldSet};
pub use events::{parse_events, validate, PoliticalEvent, Slot};
pub use index::{RetrievalHit, VectorIndex};
pub use llm::{LlmBackend, LlmConfig, MockScript};
pub use prompt::{AssembledPrompt, PromptTemplate};
