//! The eight-property political event record, lenient extraction of events
//! from model output, the validity rule, and source attribution.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::parse_date;
use crate::index::RetrievalHit;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("no JSON event array found in model output")]
    Parse { raw_text: String },
}

/// One property of a political event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Actor,
    Action,
    Recipient,
    Instrument,
    Reason,
    Time,
    Location,
    Reporter,
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::Actor,
        Slot::Action,
        Slot::Recipient,
        Slot::Instrument,
        Slot::Reason,
        Slot::Time,
        Slot::Location,
        Slot::Reporter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Actor => "actor",
            Slot::Action => "action",
            Slot::Recipient => "recipient",
            Slot::Instrument => "instrument",
            Slot::Reason => "reason",
            Slot::Time => "time",
            Slot::Location => "location",
            Slot::Reporter => "reporter",
        }
    }

    pub fn from_name(name: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.name().eq_ignore_ascii_case(name))
    }

    fn meaning(self) -> &'static str {
        match self {
            Slot::Actor => "who performs the action (person, party, agency, government)",
            Slot::Action => "what was done, as a short verb phrase",
            Slot::Recipient => "who or what the action is directed at",
            Slot::Instrument => "the object or means used to carry out the action",
            Slot::Reason => "why the event happened",
            Slot::Time => "when it happened; YYYY-MM-DD when a date is known",
            Slot::Location => "where it happened",
            Slot::Reporter => "who reported the event (journalist or outlet)",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Canonical event record. Serializes to exactly nine keys in a fixed order,
/// with `null` for absent properties.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoliticalEvent {
    pub actor: Option<String>,
    pub action: Option<String>,
    pub recipient: Option<String>,
    pub instrument: Option<String>,
    pub reason: Option<String>,
    pub time: Option<String>,
    pub location: Option<String>,
    pub reporter: Option<String>,
    #[serde(default)]
    pub sources: Vec<String>,
}

impl PoliticalEvent {
    pub fn slot(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::Actor => self.actor.as_deref(),
            Slot::Action => self.action.as_deref(),
            Slot::Recipient => self.recipient.as_deref(),
            Slot::Instrument => self.instrument.as_deref(),
            Slot::Reason => self.reason.as_deref(),
            Slot::Time => self.time.as_deref(),
            Slot::Location => self.location.as_deref(),
            Slot::Reporter => self.reporter.as_deref(),
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut Option<String> {
        match slot {
            Slot::Actor => &mut self.actor,
            Slot::Action => &mut self.action,
            Slot::Recipient => &mut self.recipient,
            Slot::Instrument => &mut self.instrument,
            Slot::Reason => &mut self.reason,
            Slot::Time => &mut self.time,
            Slot::Location => &mut self.location,
            Slot::Reporter => &mut self.reporter,
        }
    }

    /// Non-null properties in canonical order.
    pub fn filled_slots(&self) -> impl Iterator<Item = (Slot, &str)> {
        Slot::ALL
            .into_iter()
            .filter_map(|s| self.slot(s).map(|v| (s, v)))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("event serializes")
    }

    pub fn is_valid(&self) -> bool {
        validate(self).is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingAction,
    MissingParticipant,
    /// A cited source that was not part of the prompt context.
    UnknownSource(String),
    /// Attribution is on but the event cites nothing.
    MissingSource,
    NotAnObject,
    BadValue(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingAction => f.write_str("missing action"),
            Violation::MissingParticipant => f.write_str("missing actor and recipient"),
            Violation::UnknownSource(tag) => write!(f, "unknown source {tag:?}"),
            Violation::MissingSource => f.write_str("no source cited"),
            Violation::NotAnObject => f.write_str("array element is not an object"),
            Violation::BadValue(key) => write!(f, "unsupported value for {key:?}"),
        }
    }
}

/// An event needs an action and at least one of actor or recipient; nothing
/// else is required.
pub fn validate(event: &PoliticalEvent) -> Vec<Violation> {
    let mut violations = Vec::new();
    if event.action.is_none() {
        violations.push(Violation::MissingAction);
    }
    if event.actor.is_none() && event.recipient.is_none() {
        violations.push(Violation::MissingParticipant);
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidEvent {
    pub raw: Value,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub events: Vec<PoliticalEvent>,
    pub invalid: Vec<InvalidEvent>,
    pub raw_text: String,
}

/// Description of the output contract, substituted for `{schema}` in prompts.
pub fn schema_description() -> String {
    let mut out = String::from(
        "Return a JSON array. Each element is one political event object with exactly these keys:\n",
    );
    for slot in Slot::ALL {
        out.push_str(&format!("  \"{}\": {}\n", slot.name(), slot.meaning()));
    }
    out.push_str(
        "  \"sources\": list of the source tags (for example \"S1\") of the context passages that state the event\n",
    );
    out.push_str(
        "Use null for any property the context does not state. Every event needs an action and an actor or recipient.\n\
         Emit one object per action. If the context holds no relevant event, return [].",
    );
    out
}

fn clean_text(value: &str) -> Option<String> {
    let trimmed = value.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_owned())
}

/// ISO date when the text is a recognizable date; the trimmed text otherwise.
pub fn canonical_time(value: &str) -> Option<String> {
    let cleaned = clean_text(value)?;
    Some(match parse_date(&cleaned) {
        Some(date) => date.format("%Y-%m-%d").to_string(),
        None => cleaned,
    })
}

fn value_text(value: &Value) -> Result<Option<String>, ()> {
    match value {
        Value::Null => Ok(None),
        Value::String(s) => Ok(clean_text(s)),
        Value::Number(n) => Ok(Some(n.to_string())),
        Value::Bool(b) => Ok(Some(b.to_string())),
        Value::Array(items) => {
            let mut parts = Vec::new();
            for item in items {
                if let Some(part) = value_text(item)? {
                    parts.push(part);
                }
            }
            Ok((!parts.is_empty()).then(|| parts.join(", ")))
        }
        Value::Object(_) => Err(()),
    }
}

fn source_list(value: &Value) -> Result<Vec<String>, ()> {
    let mut out = Vec::new();
    let mut push = |s: &str| {
        let tag = s.trim().trim_start_matches('[').trim_end_matches(']').trim();
        if !tag.is_empty() {
            out.push(tag.to_owned());
        }
    };
    match value {
        Value::Null => {}
        Value::String(s) => s.split(',').for_each(&mut push),
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::String(s) => push(s),
                    Value::Number(n) => push(&format!("S{n}")),
                    _ => return Err(()),
                }
            }
        }
        _ => return Err(()),
    }
    Ok(out)
}

fn event_from_object(object: &Map<String, Value>) -> Result<PoliticalEvent, Vec<Violation>> {
    let mut event = PoliticalEvent::default();
    let mut bad = Vec::new();
    for (key, value) in object {
        if key.eq_ignore_ascii_case("sources") {
            match source_list(value) {
                Ok(sources) => event.sources = sources,
                Err(()) => bad.push(Violation::BadValue(key.clone())),
            }
            continue;
        }
        let Some(slot) = Slot::from_name(key) else {
            continue;
        };
        match value_text(value) {
            Ok(text) => {
                *event.slot_mut(slot) = match slot {
                    Slot::Time => text.as_deref().and_then(canonical_time),
                    _ => text,
                }
            }
            Err(()) => bad.push(Violation::BadValue(key.clone())),
        }
    }
    if bad.is_empty() {
        Ok(event)
    } else {
        Err(bad)
    }
}

/// Content of fenced code blocks, in order of appearance.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip an info string such as `json` up to the end of the line.
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks
}

/// Upper bound on characters scanned while looking for JSON spans, so that
/// bracket-heavy garbage cannot make location quadratic.
const SCAN_BUDGET: usize = 1 << 24;

/// End (exclusive) of the bracket-balanced span opening at `start`, skipping
/// brackets inside JSON strings. Charges every scanned character to `budget`.
fn balanced_end(text: &str, start: usize, budget: &mut usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        *budget = budget.checked_sub(1)?;
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '[' | '{' => depth += 1,
            ']' | '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + offset + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

/// Removes commas that directly precede a closing bracket (outside strings).
fn strip_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_span(span: &str) -> Option<Value> {
    serde_json::from_str(span)
        .ok()
        .or_else(|| serde_json::from_str(&strip_trailing_commas(span)).ok())
}

/// An array of objects (possibly empty), or a lone object promoted to one.
fn as_event_list(value: Value) -> Option<Vec<Value>> {
    match value {
        Value::Array(items) if items.iter().all(Value::is_object) => Some(items),
        Value::Object(_) => Some(vec![value]),
        _ => None,
    }
}

fn locate_in(text: &str, budget: &mut usize) -> Option<Vec<Value>> {
    for (start, c) in text.char_indices() {
        if *budget == 0 {
            return None;
        }
        if c != '[' && c != '{' {
            continue;
        }
        let Some(end) = balanced_end(text, start, budget) else {
            continue;
        };
        if let Some(items) = parse_span(&text[start..end]).and_then(as_event_list) {
            return Some(items);
        }
    }
    None
}

/// Finds the first JSON event array in model output, preferring fenced code blocks.
pub fn locate_event_json(text: &str) -> Option<Vec<Value>> {
    let mut budget = SCAN_BUDGET;
    fenced_blocks(text)
        .into_iter()
        .find_map(|block| locate_in(block, &mut budget))
        .or_else(|| locate_in(text, &mut budget))
}

/// Extracts and validates events from raw model output.
pub fn parse_events(llm_text: &str) -> Result<ExtractionResult, EventError> {
    let items = locate_event_json(llm_text).ok_or_else(|| EventError::Parse {
        raw_text: llm_text.to_owned(),
    })?;
    let mut result = ExtractionResult {
        events: Vec::new(),
        invalid: Vec::new(),
        raw_text: llm_text.to_owned(),
    };
    for raw in items {
        let Value::Object(object) = &raw else {
            result.invalid.push(InvalidEvent {
                raw,
                violations: vec![Violation::NotAnObject],
            });
            continue;
        };
        let verdict = event_from_object(object).and_then(|event| {
            let violations = validate(&event);
            if violations.is_empty() {
                Ok(event)
            } else {
                Err(violations)
            }
        });
        match verdict {
            Ok(event) => result.events.push(event),
            Err(violations) => result.invalid.push(InvalidEvent { raw, violations }),
        }
    }
    Ok(result)
}

/// `S3` / `s3` / `S3: <chunk id>` → 3.
fn tag_number(tag: &str) -> Option<usize> {
    let rest = tag.strip_prefix('S').or_else(|| tag.strip_prefix('s'))?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let tail = rest[digits.len()..].trim_start();
    if digits.is_empty() || !(tail.is_empty() || tail.starts_with(':')) {
        return None;
    }
    digits.parse().ok()
}

/// Rewrites each event's cited tags to chunk ids of the prompt context.
///
/// `hits` must be exactly the context passages, in tag order (`S1` is
/// `hits[0]`). Events citing anything else, or nothing, move to `invalid`.
pub fn attach_sources(result: ExtractionResult, hits: &[RetrievalHit]) -> ExtractionResult {
    let ExtractionResult {
        events,
        mut invalid,
        raw_text,
    } = result;
    let mut kept = Vec::with_capacity(events.len());
    for mut event in events {
        let mut resolved: Vec<String> = Vec::new();
        let mut violations = Vec::new();
        for tag in &event.sources {
            let hit = match tag_number(tag) {
                Some(n) if (1..=hits.len()).contains(&n) => Some(&hits[n - 1]),
                Some(_) => None,
                None => hits.iter().find(|h| h.chunk_id == *tag),
            };
            match hit {
                Some(hit) if !resolved.contains(&hit.chunk_id) => resolved.push(hit.chunk_id.clone()),
                Some(_) => {}
                None => violations.push(Violation::UnknownSource(tag.clone())),
            }
        }
        if event.sources.is_empty() {
            violations.push(Violation::MissingSource);
        }
        if violations.is_empty() {
            event.sources = resolved;
            kept.push(event);
        } else {
            invalid.push(InvalidEvent {
                raw: event.to_json(),
                violations,
            });
        }
    }
    ExtractionResult {
        events: kept,
        invalid,
        raw_text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::SourceRef;

    fn hits(n: usize) -> Vec<RetrievalHit> {
        (1..=n)
            .map(|i| RetrievalHit {
                chunk_id: format!("doc{i}#0"),
                score: 1.0 / i as f64,
                text: format!("headline {i}"),
                source: SourceRef {
                    doc_id: format!("doc{i}"),
                    headline: format!("headline {i}"),
                    link: None,
                },
            })
            .collect()
    }

    fn event(pairs: &[(Slot, &str)]) -> PoliticalEvent {
        let mut e = PoliticalEvent::default();
        for &(slot, value) in pairs {
            *e.slot_mut(slot) = Some(value.to_owned());
        }
        e
    }

    #[test]
    fn judge_event_parses_as_valid() {
        let text = r#"[{"actor":"Judge","action":"overturns","recipient":"Texas bans on school mask mandates","time":"2021-11-11","reporter":"Nick Visser"}]"#;
        let result = parse_events(text).unwrap();
        assert_eq!(result.events.len(), 1);
        assert!(result.invalid.is_empty());
        let e = &result.events[0];
        assert_eq!(e.actor.as_deref(), Some("Judge"));
        assert_eq!(e.time.as_deref(), Some("2021-11-11"));
        assert_eq!(e.location, None);
    }

    #[test]
    fn empty_array() {
        let result = parse_events("[]").unwrap();
        assert!(result.events.is_empty() && result.invalid.is_empty());
    }

    #[test]
    fn fenced_block_inside_prose_goes_to_invalid_without_action() {
        let text = "Here is what I found:\n```json\n[{\"actor\":\"Queen Elizabeth\"}]\n```\nHope this helps.";
        let result = parse_events(text).unwrap();
        assert!(result.events.is_empty());
        assert_eq!(result.invalid.len(), 1);
        assert_eq!(result.invalid[0].violations, [Violation::MissingAction]);
        assert_eq!(result.raw_text, text);
    }

    #[test]
    fn no_json_is_a_parse_error_preserving_text() {
        match parse_events("I could not find any events.") {
            Err(EventError::Parse { raw_text }) => assert_eq!(raw_text, "I could not find any events."),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lone_object_is_promoted() {
        let result = parse_events(r#"Answer: {"actor":"FDA","action":"approves","sources":["S1"]}"#).unwrap();
        assert_eq!(result.events.len(), 1);
        assert_eq!(result.events[0].sources, ["S1"]);
    }

    #[test]
    fn prose_brackets_before_json_are_skipped() {
        let text = r#"According to [S1: abc#0], the events are: [{"actor":"GOP","action":"shifts stance",}]"#;
        let result = parse_events(text).unwrap();
        assert_eq!(result.events.len(), 1);
    }

    #[test]
    fn empty_strings_unknown_keys_and_dates() {
        let text = r#"[{"actor":"  ","recipient":"CDC","action":"blocked","time":"June 19, 2021","confidence":0.9}]"#;
        let e = &parse_events(text).unwrap().events[0];
        assert_eq!(e.actor, None);
        assert_eq!(e.time.as_deref(), Some("2021-06-19"));
        let vague = parse_events(r#"[{"actor":"a","action":"b","time":"last week"}]"#).unwrap();
        assert_eq!(vague.events[0].time.as_deref(), Some("last week"));
    }

    #[test]
    fn nested_objects_are_bad_values() {
        let result = parse_events(r#"[{"actor":{"name":"x"},"action":"y"}]"#).unwrap();
        assert_eq!(result.invalid[0].violations, [Violation::BadValue("actor".into())]);
    }

    #[test]
    fn validity_rule_examples() {
        assert!(validate(&event(&[(Slot::Action, "contracts"), (Slot::Actor, "Queen Elizabeth")])).is_empty());
        assert_eq!(validate(&event(&[(Slot::Actor, "FDA")])), [Violation::MissingAction]);
        assert_eq!(
            validate(&event(&[(Slot::Action, "protests")])),
            [Violation::MissingParticipant]
        );
        assert!(validate(&event(&[(Slot::Action, "arrested"), (Slot::Recipient, "Ammon Bundy")])).is_empty());
    }

    #[test]
    fn canonical_json_has_nine_keys_in_order() {
        let json = serde_json::to_string(&event(&[(Slot::Actor, "FDA")])).unwrap();
        assert_eq!(
            json,
            r#"{"actor":"FDA","action":null,"recipient":null,"instrument":null,"reason":null,"time":null,"location":null,"reporter":null,"sources":[]}"#
        );
    }

    #[test]
    fn attach_resolves_tags() {
        let mut e = event(&[(Slot::Actor, "FDA"), (Slot::Action, "approves")]);
        e.sources = vec!["S1".into(), "S1: doc1#0".into()];
        let result = ExtractionResult {
            events: vec![e],
            invalid: vec![],
            raw_text: String::new(),
        };
        let attached = attach_sources(result, &hits(5));
        assert_eq!(attached.events[0].sources, ["doc1#0"]);
    }

    #[test]
    fn out_of_range_tag_is_unknown_source() {
        let mut e = event(&[(Slot::Actor, "FDA"), (Slot::Action, "approves")]);
        e.sources = vec!["S9".into()];
        let result = ExtractionResult {
            events: vec![e],
            invalid: vec![],
            raw_text: String::new(),
        };
        let attached = attach_sources(result, &hits(5));
        assert!(attached.events.is_empty());
        assert_eq!(attached.invalid[0].violations, [Violation::UnknownSource("S9".into())]);
    }

    #[test]
    fn uncited_event_is_invalid_when_attributing() {
        let result = ExtractionResult {
            events: vec![event(&[(Slot::Actor, "FDA"), (Slot::Action, "approves")])],
            invalid: vec![],
            raw_text: String::new(),
        };
        let attached = attach_sources(result, &hits(2));
        assert_eq!(attached.invalid[0].violations, [Violation::MissingSource]);
    }

    #[test]
    fn literal_chunk_ids_are_accepted() {
        let mut e = event(&[(Slot::Recipient, "CDC"), (Slot::Action, "blocked")]);
        e.sources = vec!["doc2#0".into()];
        let result = ExtractionResult {
            events: vec![e],
            invalid: vec![],
            raw_text: String::new(),
        };
        assert_eq!(attach_sources(result, &hits(3)).events[0].sources, ["doc2#0"]);
    }

    #[test]
    fn schema_names_every_property() {
        let schema = schema_description();
        for slot in Slot::ALL {
            assert!(schema.contains(&format!("\"{}\"", slot.name())));
        }
        assert!(schema.contains("\"sources\""));
    }
}
