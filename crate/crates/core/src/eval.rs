//! Slot-level scoring of extracted events against a curated gold set, using
//! cosine similarity between locally embedded property values.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, embed_local, EmbedError, DEFAULT_DIM};
use crate::engine::Answer;
use crate::events::{validate, PoliticalEvent, Slot};

pub const DEFAULT_TAU: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold set {location}: {message}")]
    GoldFormat { location: String, message: String },
    #[error("no prediction aligned with gold question {0:?}")]
    Alignment(String),
    #[error("prediction for {0:?} has no gold item")]
    UnexpectedPrediction(String),
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldItem {
    pub question: String,
    pub gold_events: Vec<PoliticalEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSet {
    pub items: Vec<GoldItem>,
}

impl GoldSet {
    /// Checks that there is at least one item and that every gold event is valid.
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.items.is_empty() {
            return Err(EvalError::GoldFormat {
                location: "items".into(),
                message: "empty".into(),
            });
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.question.trim().is_empty() {
                return Err(EvalError::GoldFormat {
                    location: format!("items[{i}].question"),
                    message: "empty question".into(),
                });
            }
            for (j, event) in item.gold_events.iter().enumerate() {
                let violations = validate(event);
                if !violations.is_empty() {
                    let message = violations
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(", ");
                    return Err(EvalError::GoldFormat {
                        location: format!("items[{i}].gold_events[{j}]"),
                        message,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn slot_count(&self) -> usize {
        self.items
            .iter()
            .flat_map(|i| &i.gold_events)
            .map(|e| e.filled_slots().count())
            .sum()
    }
}

pub fn parse_gold(text: &str, origin: &str) -> Result<GoldSet, EvalError> {
    let gold: GoldSet = serde_json::from_str(text).map_err(|e| EvalError::GoldFormat {
        location: format!("{origin}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    gold.validate()?;
    Ok(gold)
}

pub fn load_gold(path: &Path) -> Result<GoldSet, EvalError> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| EvalError::GoldFormat {
        location: origin.clone(),
        message: e.to_string(),
    })?;
    parse_gold(&text, &origin)
}

/// Similarity of a predicted and a gold property value, and whether it clears `tau`.
///
/// Identical strings score exactly 1.0; otherwise the score is the cosine of
/// their local embeddings.
pub fn match_slot(pred: &str, gold: &str, tau: f64) -> Result<(f64, bool), EmbedError> {
    let (pred, gold) = (pred.trim(), gold.trim());
    let score = if pred == gold && !pred.is_empty() {
        1.0
    } else {
        let p = embed_local(pred, DEFAULT_DIM)?;
        let g = embed_local(gold, DEFAULT_DIM)?;
        cosine(&p, &g)?
    };
    Ok((score, score >= tau))
}

/// Like [`match_slot`], but text without tokens simply scores zero.
fn slot_score(pred: &str, gold: &str, tau: f64) -> (f64, bool) {
    match match_slot(pred, gold, tau) {
        Ok(result) => result,
        Err(_) => (0.0, 0.0 >= tau),
    }
}

/// Predicted events for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question: String,
    pub events: Vec<PoliticalEvent>,
}

impl From<&Answer> for Prediction {
    fn from(answer: &Answer) -> Self {
        Prediction {
            question: answer.question.clone(),
            events: answer.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub item: usize,
    pub question: String,
    pub gold_event: usize,
    /// Index into the item's predictions, when the gold event was paired.
    pub predicted_event: Option<usize>,
    pub slot: Slot,
    pub gold: String,
    pub predicted: Option<String>,
    pub score: Option<f64>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub items: usize,
    pub per_slot: Vec<SlotRecord>,
    pub matched_count: usize,
    pub gold_slot_count: usize,
    pub accuracy: f64,
}

/// Pairs gold with predicted events greedily by descending total slot
/// similarity; each side is used at most once. Returns `pairing[gold] = pred`.
fn pair_events(gold: &[PoliticalEvent], predicted: &[PoliticalEvent], tau: f64) -> Vec<Option<usize>> {
    let mut candidates = Vec::with_capacity(gold.len() * predicted.len());
    for (g, gold_event) in gold.iter().enumerate() {
        for (p, pred_event) in predicted.iter().enumerate() {
            let total: f64 = gold_event
                .filled_slots()
                .filter_map(|(slot, gold_text)| {
                    pred_event
                        .slot(slot)
                        .map(|pred_text| slot_score(pred_text, gold_text, tau).0)
                })
                .sum();
            candidates.push((total, g, p));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pairing = vec![None; gold.len()];
    let mut used = vec![false; predicted.len()];
    for (_, g, p) in candidates {
        if pairing[g].is_none() && !used[p] {
            pairing[g] = Some(p);
            used[p] = true;
        }
    }
    pairing
}

/// Scores predictions against the gold set at threshold `tau`.
///
/// Accuracy is matched non-null gold slots over all non-null gold slots.
pub fn evaluate(predictions: &[Prediction], gold: &GoldSet, tau: f64) -> Result<EvalReport, EvalError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvalError::Threshold(tau));
    }
    let mut by_question: HashMap<&str, VecDeque<&Prediction>> = HashMap::new();
    for prediction in predictions {
        by_question
            .entry(prediction.question.trim())
            .or_default()
            .push_back(prediction);
    }

    let mut per_slot = Vec::new();
    for (item_index, item) in gold.items.iter().enumerate() {
        let prediction = by_question
            .get_mut(item.question.trim())
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| EvalError::Alignment(item.question.clone()))?;
        let pairing = pair_events(&item.gold_events, &prediction.events, tau);
        for (g, gold_event) in item.gold_events.iter().enumerate() {
            let paired = pairing[g].map(|p| (p, &prediction.events[p]));
            for (slot, gold_text) in gold_event.filled_slots() {
                let predicted = paired.and_then(|(_, e)| e.slot(slot));
                let scored = predicted.map(|p| slot_score(p, gold_text, tau));
                per_slot.push(SlotRecord {
                    item: item_index,
                    question: item.question.clone(),
                    gold_event: g,
                    predicted_event: paired.map(|(p, _)| p),
                    slot,
                    gold: gold_text.to_owned(),
                    predicted: predicted.map(str::to_owned),
                    score: scored.map(|(s, _)| s),
                    matched: scored.is_some_and(|(_, m)| m),
                });
            }
        }
    }
    if let Some(leftover) = by_question.values().flatten().next() {
        return Err(EvalError::UnexpectedPrediction(leftover.question.clone()));
    }

    let gold_slot_count = per_slot.len();
    let matched_count = per_slot.iter().filter(|r| r.matched).count();
    let accuracy = if gold_slot_count == 0 {
        0.0
    } else {
        matched_count as f64 / gold_slot_count as f64
    };
    Ok(EvalReport {
        tau,
        items: gold.items.len(),
        per_slot,
        matched_count,
        gold_slot_count,
        accuracy,
    })
}

fn clip(text: &str, width: usize) -> String {
    if text.chars().count() <= width {
        text.to_owned()
    } else {
        let mut out: String = text.chars().take(width.saturating_sub(1)).collect();
        out.push('…');
        out
    }
}

/// Human-readable per-slot table followed by the summary line.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4} {:>3} {:<10} {:<28} {:<28} {:>6} ok",
        "item", "ev", "slot", "gold", "predicted", "score"
    );
    for r in &report.per_slot {
        let _ = writeln!(
            out,
            "{:>4} {:>3} {:<10} {:<28} {:<28} {:>6} {}",
            r.item,
            r.gold_event,
            r.slot.name(),
            clip(&r.gold, 28),
            clip(r.predicted.as_deref().unwrap_or("-"), 28),
            r.score.map_or("-".to_owned(), |s| format!("{s:.3}")),
            if r.matched { "yes" } else { "no" },
        );
    }
    let _ = writeln!(
        out,
        "matched {}/{} gold slots over {} items at tau {}: accuracy {:.3}",
        report.matched_count, report.gold_slot_count, report.items, report.tau, report.accuracy
    );
    out
}
