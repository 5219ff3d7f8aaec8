mod support;

use std::fs;
use std::path::Path;

use polevent_core::corpus::{ChunkPolicy, CorpusError, CorpusFilter};
use polevent_core::embed::{EmbedderConfig, EmbedderKind};
use polevent_core::engine::{
    build, build_knowledge, CorpusConfig, Engine, EngineConfig, EngineError, IndexMeta,
    KnowledgeBase, CHUNKS_FILE, INDEX_FILE, META_FILE, REJECTS_FILE,
};
use polevent_core::eval::{evaluate, load_gold, Prediction};
use polevent_core::index::{ChunkStore, VectorIndex};
use polevent_core::llm::{LlmBackend, MockScript};
use polevent_core::prompt::PromptTemplate;

fn mock() -> LlmBackend {
    LlmBackend::Mock(MockScript::load(&support::fixture("sample_mock.json")).unwrap())
}

fn engine_over(dir: &Path) -> Engine {
    Engine::open(
        dir,
        EmbedderConfig::default(),
        mock(),
        PromptTemplate::default(),
        EngineConfig::default(),
    )
    .unwrap()
}

fn build_fixture(dir: &Path) {
    let out = build(
        &support::fixture("sample.jsonl"),
        &CorpusConfig::default(),
        &EmbedderConfig::default(),
        dir,
    )
    .unwrap();
    assert_eq!(out.report.documents, 15);
    assert_eq!(out.report.chunks, 15);
}

#[test]
fn fixture_questions_yield_their_canned_events() {
    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    let engine = engine_over(dir.path());
    let gold = load_gold(&support::fixture("sample_gold.json")).unwrap();
    assert_eq!(gold.items.len(), 15);

    let mut predictions = Vec::new();
    for item in &gold.items {
        let answer = engine.answer_query(&item.question).unwrap();
        assert_eq!(answer.events.len(), 1, "{}: {}", item.question, answer.raw_text);
        let event = &answer.events[0];
        let mut expected = item.gold_events[0].clone();
        expected.sources = event.sources.clone();
        assert_eq!(event, &expected);

        // The cited chunk is one the model was shown, and its document carries
        // the record's headline.
        let cited = &event.sources[0];
        assert!(answer.context_ids.contains(cited));
        let attributions = answer.attributions();
        assert_eq!(attributions.len(), 1);
        let record = engine.knowledge().chunks.get(cited).unwrap().clone();
        assert_eq!(attributions[0].1.headline, record.headline);
        assert!(record.text.contains(&record.headline));
        predictions.push(Prediction::from(&answer));
    }
    let report = evaluate(&predictions, &gold, 0.8).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn fda_question_returns_fda_event() {
    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    let answer = engine_over(dir.path())
        .answer_query("What did the FDA approve in April 2022?")
        .unwrap();
    assert_eq!(answer.events.len(), 1);
    assert_eq!(answer.events[0].actor.as_deref(), Some("FDA"));
    assert!(answer.hits.len() <= 5);
}

#[test]
fn build_writes_all_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_fixture(a.path());
    build_fixture(b.path());
    for name in [INDEX_FILE, CHUNKS_FILE, META_FILE, REJECTS_FILE] {
        let left = fs::read(a.path().join(name)).unwrap();
        let right = fs::read(b.path().join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between builds");
    }
    let kb = KnowledgeBase::load(a.path()).unwrap();
    assert_eq!(kb.index.len(), 15);
    assert_eq!(kb.chunks.len(), 15);
    assert_eq!(kb.meta.embedder.dim, Some(1024));
}

#[test]
fn corpus_outside_window_is_empty() {
    let filter = CorpusFilter {
        date_from: "2010-01-01".parse().unwrap(),
        date_to: "2012-12-31".parse().unwrap(),
        ..CorpusFilter::default()
    };
    let config = CorpusConfig {
        filter,
        ..CorpusConfig::default()
    };
    let err = build_knowledge(&support::fixture("sample.jsonl"), &config, &EmbedderConfig::default())
        .unwrap_err();
    assert!(matches!(err, EngineError::Corpus(CorpusError::EmptyCorpus)), "{err:?}");
}

#[test]
fn rejects_are_reported_with_source_lines() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("news.jsonl");
    let mut lines: Vec<String> = support::sample_records()
        .iter()
        .take(3)
        .map(|(h, d, a)| support::news_line(h, d, a))
        .collect();
    lines.insert(1, "{not json".into());
    lines.push(support::news_line("Undated Story", "someday", "X"));
    fs::write(&corpus, lines.join("\n")).unwrap();
    let out = build(&corpus, &CorpusConfig::default(), &EmbedderConfig::default(), &dir.path().join("idx")).unwrap();
    assert_eq!(out.report.documents, 3);
    let lines: Vec<usize> = out.rejects.iter().map(|r| r.line).collect();
    assert_eq!(lines, [2, 5]);
    let written = fs::read_to_string(dir.path().join("idx").join(REJECTS_FILE)).unwrap();
    assert_eq!(written.lines().count(), 2);
}

#[test]
fn small_chunk_policy_splits_documents() {
    let config = CorpusConfig {
        chunk: ChunkPolicy { max_chars: 64 },
        ..CorpusConfig::default()
    };
    let out = build_knowledge(&support::fixture("sample.jsonl"), &config, &EmbedderConfig::default()).unwrap();
    assert!(out.report.chunks > 15);
    for stored in out.knowledge.chunks.iter() {
        assert!(out.knowledge.index.contains(&stored.chunk_id));
    }
}

#[test]
fn empty_index_cannot_be_queried() {
    let kb = KnowledgeBase {
        index: VectorIndex::new(),
        chunks: ChunkStore::default(),
        meta: IndexMeta {
            embedder: EmbedderConfig::default().descriptor(),
            documents: 0,
            chunks: 0,
            generation: 0,
        },
    };
    let engine = Engine::new(kb, EmbedderConfig::default(), mock(), PromptTemplate::default(), EngineConfig::default()).unwrap();
    assert!(matches!(engine.answer_query("anything"), Err(EngineError::QueryOnEmptyIndex)));
    assert!(matches!(engine.answer_query("   "), Err(EngineError::EmptyQuestion)));
}

#[test]
fn embedder_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    let other = EmbedderConfig {
        dim: 512,
        ..EmbedderConfig::default()
    };
    let engine = Engine::open(dir.path(), other, mock(), PromptTemplate::default(), EngineConfig::default()).unwrap();
    let err = engine.answer_query("What did the FDA approve?").unwrap_err();
    assert!(matches!(err, EngineError::EmbedderMismatch { .. }), "{err:?}");

    let remote = EmbedderConfig {
        kind: EmbedderKind::Remote,
        endpoint: Some("http://127.0.0.1:9".into()),
        ..EmbedderConfig::default()
    };
    let engine = Engine::open(dir.path(), remote, mock(), PromptTemplate::default(), EngineConfig::default()).unwrap();
    assert!(matches!(engine.answer_query("x"), Err(EngineError::EmbedderMismatch { .. })));
}

#[test]
fn partial_index_directory_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    fs::remove_file(dir.path().join(CHUNKS_FILE)).unwrap();
    assert!(KnowledgeBase::load(dir.path()).is_err());

    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    let bytes = fs::read(dir.path().join(INDEX_FILE)).unwrap();
    fs::write(dir.path().join(INDEX_FILE), &bytes[..bytes.len() - 7]).unwrap();
    let err = KnowledgeBase::load(dir.path()).unwrap_err();
    assert!(matches!(err, EngineError::Index(polevent_core::index::IndexError::Format(_))), "{err:?}");
}

#[test]
fn install_swaps_generation_for_new_queries() {
    let dir = tempfile::tempdir().unwrap();
    build_fixture(dir.path());
    let engine = engine_over(dir.path());
    let before = engine.answer_query("What did the FDA approve in April 2022?").unwrap();

    let replacement_path = dir.path().join("replacement.jsonl");
    let lines: Vec<String> = support::distractor_headlines(20, 9)
        .iter()
        .map(|h| support::news_line(h, "2021-03-03", "Staff"))
        .collect();
    fs::write(&replacement_path, lines.join("\n")).unwrap();
    let next = build_knowledge(&replacement_path, &CorpusConfig::default(), &EmbedderConfig::default())
        .unwrap()
        .knowledge;
    let new_ids: Vec<String> = next.chunks.iter().map(|c| c.chunk_id.clone()).collect();
    engine.install(next);

    let after = engine.answer_query("Governor budget plan").unwrap();
    assert!(after.generation > before.generation);
    assert!(after.hits.iter().all(|h| new_ids.contains(&h.chunk_id)));
    assert!(after.events.is_empty());
}
