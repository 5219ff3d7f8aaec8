//! News corpus ingestion: JSON-lines parsing, normalization and date/category
//! filtering, and chunking into indexable text units.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::embed::fnv1a64;

/// Separator between headline and body in chunk text.
pub const HEADLINE_SEPARATOR: &str = " - ";

/// Smallest chunk budget accepted by [`chunk_documents`].
pub const MIN_CHUNK_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] io::Error),
    #[error("corpus contains no usable records")]
    EmptyCorpus,
    #[error("invalid filter: {0}")]
    Filter(String),
    #[error("invalid chunk policy: max_chars must be at least {MIN_CHUNK_CHARS}, got {0}")]
    ChunkPolicy(usize),
}

/// Names of the JSON fields holding each record attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub category: String,
    pub headline: String,
    pub authors: String,
    pub link: String,
    pub short_description: String,
    pub date: String,
}

impl Default for FieldMap {
    /// The News Category Dataset field names.
    fn default() -> Self {
        Self {
            category: "category".into(),
            headline: "headline".into(),
            authors: "authors".into(),
            link: "link".into(),
            short_description: "short_description".into(),
            date: "date".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub category: String,
    pub headline: String,
    pub authors: String,
    pub link: String,
    pub short_description: String,
    pub date: String,
}

/// A line or record that could not be used, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    /// Source line of each record, parallel to `records`.
    pub lines: Vec<usize>,
    pub rejects: Vec<Reject>,
}

fn field_text(object: &Map<String, Value>, name: &str) -> Result<String, String> {
    match object.get(name) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::Bool(b)) => Ok(b.to_string()),
        Some(_) => Err(format!("field `{name}` is not a scalar")),
    }
}

fn parse_line(line: &str, fields: &FieldMap) -> Result<RawRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(object) = value else {
        return Err("line is not a JSON object".into());
    };
    let record = RawRecord {
        category: field_text(&object, &fields.category)?,
        headline: field_text(&object, &fields.headline)?,
        authors: field_text(&object, &fields.authors)?,
        link: field_text(&object, &fields.link)?,
        short_description: field_text(&object, &fields.short_description)?,
        date: field_text(&object, &fields.date)?,
    };
    if record.headline.trim().is_empty() {
        return Err(format!("missing or empty `{}`", fields.headline));
    }
    Ok(record)
}

/// Parses newline-delimited JSON records. Bad lines are collected as rejects;
/// blank lines are skipped silently.
pub fn parse_jsonl<R: BufRead>(reader: R, fields: &FieldMap) -> Result<ParseOutcome, CorpusError> {
    let mut outcome = ParseOutcome::default();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        let number = index + 1;
        let trimmed = line.trim_start_matches('\u{feff}').trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_line(trimmed, fields) {
            Ok(record) => {
                outcome.records.push(record);
                outcome.lines.push(number);
            }
            Err(reason) => outcome.rejects.push(Reject {
                line: number,
                reason,
            }),
        }
    }
    if outcome.records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(outcome)
}

/// Lists the corpus files under `path`: the file itself, or every `.jsonl` /
/// `.json` file directly inside a directory, sorted by name.
pub fn corpus_files(path: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let meta = fs::metadata(path)?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry_path = entry?.path();
        let is_json = entry_path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json"));
        if is_json && entry_path.is_file() {
            files.push(entry_path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads and parses every corpus file under `path`. Reject line numbers are
/// relative to the file they came from.
pub fn read_corpus(path: &Path, fields: &FieldMap) -> Result<ParseOutcome, CorpusError> {
    let mut all = ParseOutcome::default();
    for file in corpus_files(path)? {
        let reader = io::BufReader::new(fs::File::open(&file)?);
        match parse_jsonl(reader, fields) {
            Ok(outcome) => {
                all.records.extend(outcome.records);
                all.lines.extend(outcome.lines);
                all.rejects.extend(outcome.rejects);
            }
            Err(CorpusError::EmptyCorpus) => continue,
            Err(other) => return Err(other),
        }
    }
    if all.records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub headline: String,
    pub body: String,
    pub author: Option<String>,
    pub published: NaiveDate,
    pub category: String,
    pub source_link: Option<String>,
}

impl Document {
    /// Converts back to the raw record shape, with ISO dates and the canonical
    /// "no author" spelling.
    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            category: self.category.clone(),
            headline: self.headline.clone(),
            authors: self.author.clone().unwrap_or_default(),
            link: self.source_link.clone().unwrap_or_default(),
            short_description: self.body.clone(),
            date: self.published.format("%Y-%m-%d").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusFilter {
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    /// Empty means every category.
    pub categories: BTreeSet<String>,
}

impl Default for CorpusFilter {
    fn default() -> Self {
        Self {
            date_from: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            date_to: NaiveDate::from_ymd_opt(2022, 12, 31).expect("valid date"),
            categories: BTreeSet::from(["POLITICS".to_owned()]),
        }
    }
}

impl CorpusFilter {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.date_from > self.date_to {
            return Err(CorpusError::Filter(format!(
                "date_from {} is after date_to {}",
                self.date_from, self.date_to
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, date: NaiveDate, category: &str) -> bool {
        let in_window = (self.date_from..=self.date_to).contains(&date);
        let category = category.trim();
        in_window
            && (self.categories.is_empty()
                || self.categories.iter().any(|c| c.eq_ignore_ascii_case(category)))
    }
}

/// Parses the date formats seen in news dumps; timestamps keep only their date.
pub fn parse_date(text: &str) -> Option<NaiveDate> {
    let text = text.trim();
    let date_part = text
        .split(['T', ' '])
        .next()
        .filter(|p| p.len() == 10 && p.as_bytes().get(4) == Some(&b'-'));
    if let Some(date) = date_part.and_then(|p| NaiveDate::parse_from_str(p, "%Y-%m-%d").ok()) {
        return Some(date);
    }
    ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y", "%B %d, %Y", "%b %d, %Y", "%d %B %Y", "%d %b %Y"]
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(text, fmt).ok())
}

fn normalize_author(authors: &str) -> Option<String> {
    let trimmed = authors.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("unnamed") {
        None
    } else {
        Some(trimmed.to_owned())
    }
}

fn content_id(date: NaiveDate, headline: &str, link: &str) -> String {
    let key = format!("{date}\u{1f}{headline}\u{1f}{link}");
    format!("{:016x}", fnv1a64(key.as_bytes()))
}

#[derive(Debug, Clone, Default)]
pub struct NormalizeOutcome {
    pub documents: Vec<Document>,
    /// Records dropped for a bad date, indexed by position in the input list.
    pub rejects: Vec<Reject>,
    /// Well-formed records outside the filter window or category set.
    pub filtered_out: usize,
}

/// Normalizes records into documents and keeps those accepted by `filter`.
///
/// Document ids are derived from (date, headline, link), so the same record
/// gets the same id in every build; duplicates get a `-<n>` suffix. Reject
/// `line` values are 1-based positions in `records`.
pub fn normalize_filter(
    records: &[RawRecord],
    filter: &CorpusFilter,
) -> Result<NormalizeOutcome, CorpusError> {
    filter.validate()?;
    let mut outcome = NormalizeOutcome::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (index, record) in records.iter().enumerate() {
        let Some(published) = parse_date(&record.date) else {
            outcome.rejects.push(Reject {
                line: index + 1,
                reason: format!("unparseable date {:?}", record.date),
            });
            continue;
        };
        let headline = record.headline.trim();
        if headline.is_empty() {
            outcome.rejects.push(Reject {
                line: index + 1,
                reason: "empty headline".into(),
            });
            continue;
        }
        if !filter.accepts(published, &record.category) {
            outcome.filtered_out += 1;
            continue;
        }
        let link = record.link.trim();
        let base_id = content_id(published, headline, link);
        let duplicates = seen.entry(base_id.clone()).or_default();
        *duplicates += 1;
        let doc_id = match *duplicates {
            1 => base_id,
            n => format!("{base_id}-{n}"),
        };
        outcome.documents.push(Document {
            doc_id,
            headline: headline.to_owned(),
            body: record.short_description.trim().to_owned(),
            author: normalize_author(&record.authors),
            published,
            category: record.category.trim().to_owned(),
            source_link: (!link.is_empty()).then(|| link.to_owned()),
        });
    }
    Ok(outcome)
}

/// Writes records as JSON lines using the given field names.
pub fn write_jsonl<W: Write>(
    mut writer: W,
    records: &[RawRecord],
    fields: &FieldMap,
) -> io::Result<()> {
    for record in records {
        let mut object = Map::new();
        object.insert(fields.category.clone(), record.category.clone().into());
        object.insert(fields.headline.clone(), record.headline.clone().into());
        object.insert(fields.authors.clone(), record.authors.clone().into());
        object.insert(fields.link.clone(), record.link.clone().into());
        object.insert(
            fields.short_description.clone(),
            record.short_description.clone().into(),
        );
        object.insert(fields.date.clone(), record.date.clone().into());
        serde_json::to_writer(&mut writer, &Value::Object(object))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub text: String,
    pub doc_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkPolicy {
    pub max_chars: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self { max_chars: 512 }
    }
}

/// Headline and body joined by [`HEADLINE_SEPARATOR`]; headline alone when the body is empty.
pub fn chunk_source_text(doc: &Document) -> String {
    if doc.body.is_empty() {
        doc.headline.clone()
    } else {
        format!("{}{HEADLINE_SEPARATOR}{}", doc.headline, doc.body)
    }
}

/// Splits text into pieces of at most `max_chars` characters, breaking at the
/// last whitespace inside the budget (or hard-splitting a single over-long word).
pub fn split_text(text: &str, max_chars: usize) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut rest = text.trim();
    while !rest.is_empty() {
        // Byte offset just past the `max_chars`-th character, if the rest is longer.
        let Some((limit, _)) = rest.char_indices().nth(max_chars) else {
            pieces.push(rest.to_owned());
            break;
        };
        let window = &rest[..limit];
        // A whitespace exactly at `limit` also allows a clean split.
        let boundary = if rest[limit..].starts_with(char::is_whitespace) {
            Some(limit)
        } else {
            window
                .char_indices()
                .filter(|(_, c)| c.is_whitespace())
                .map(|(i, _)| i)
                .next_back()
                .filter(|&i| !window[..i].trim().is_empty())
        };
        let cut = boundary.unwrap_or(limit);
        pieces.push(rest[..cut].trim_end().to_owned());
        rest = rest[cut..].trim_start();
    }
    pieces
}

/// Turns documents into chunks with ids `<doc_id>#<ordinal>`.
pub fn chunk_documents(docs: &[Document], policy: ChunkPolicy) -> Result<Vec<Chunk>, CorpusError> {
    if policy.max_chars < MIN_CHUNK_CHARS {
        return Err(CorpusError::ChunkPolicy(policy.max_chars));
    }
    let mut chunks = Vec::new();
    for doc in docs {
        let pieces = split_text(&chunk_source_text(doc), policy.max_chars);
        for (ordinal, text) in pieces.into_iter().enumerate() {
            chunks.push(Chunk {
                chunk_id: format!("{}#{ordinal}", doc.doc_id),
                text,
                doc_ref: doc.doc_id.clone(),
            });
        }
    }
    Ok(chunks)
}
