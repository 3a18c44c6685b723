//! Template and question corpora.
//!
//! Two JSONL-backed stores: the jailbreak-template database consulted at
//! retrieval time, and the question database sampled when building the
//! one-shot decomposition example. Stores are immutable after load and
//! keep file order, so a given corpus file always produces the same
//! store.
//!
//! File formats (one object per line, UTF-8):
//!   templates.jsonl  {"id","text","kind","encoding"?,"family"?,"source"?}
//!   questions.jsonl  {"id","text","label"}

use std::collections::BTreeSet;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// The slot every template must contain exactly once.
pub const PLACEHOLDER: &str = "{QUESTION}";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {path}")]
    MissingFile { path: PathBuf },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: invalid record: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("store is empty (or the filter left no records)")]
    EmptyStore,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How a template carries its question: embedded as plain text, or
/// encoded (base64 is the only supported encoding on the wire).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Embedding,
    Encoding,
}

/// Encoding applied to the question slot. Unknown names are preserved
/// so callers can report them, but they never pass store validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Encoding {
    #[default]
    None,
    Base64,
    Other(String),
}

impl From<String> for Encoding {
    fn from(s: String) -> Self {
        match s.as_str() {
            "none" => Encoding::None,
            "base64" => Encoding::Base64,
            _ => Encoding::Other(s),
        }
    }
}

impl From<Encoding> for String {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::None => "none".to_string(),
            Encoding::Base64 => "base64".to_string(),
            Encoding::Other(s) => s,
        }
    }
}

fn encoding_is_none(e: &Encoding) -> bool {
    *e == Encoding::None
}

/// One jailbreak template: carrier text with a `{QUESTION}` slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub id: String,
    pub text: String,
    pub kind: TemplateKind,
    #[serde(default, skip_serializing_if = "encoding_is_none")]
    pub encoding: Encoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl TemplateRecord {
    /// Checks the record invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.text.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(format!(
                "text must contain {PLACEHOLDER} exactly once (found {n})"
            ));
        }
        match (self.kind, &self.encoding) {
            (TemplateKind::Embedding, Encoding::None) => Ok(()),
            (TemplateKind::Embedding, e) => Err(format!(
                "kind=embedding requires encoding=none, got {:?}",
                String::from(e.clone())
            )),
            (TemplateKind::Encoding, Encoding::Base64) => Ok(()),
            (TemplateKind::Encoding, e) => Err(format!(
                "kind=encoding requires encoding=base64, got {:?}",
                String::from(e.clone())
            )),
        }
    }
}

/// Ground-truth label of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionLabel {
    Harmful,
    Benign,
}

/// One question or request, harmful or benign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub label: QuestionLabel,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".to_string());
        }
        Ok(())
    }
}

/// Replaces the first `{QUESTION}` occurrence with `replacement`.
///
/// Single pass: the replacement itself is never re-scanned, so a
/// question containing the placeholder literal is substituted verbatim.
pub fn substitute_placeholder(template_text: &str, replacement: &str) -> String {
    template_text.replacen(PLACEHOLDER, replacement, 1)
}

fn read_jsonl<T, F>(path: &Path, validate: F) -> Result<Vec<T>, CorpusError>
where
    T: serde::de::DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    if !path.exists() {
        return Err(CorpusError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let content = fs::read_to_string(path)?;
    parse_jsonl(&content, validate)
}

fn parse_jsonl<T, F>(content: &str, validate: F) -> Result<Vec<T>, CorpusError>
where
    T: serde::de::DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        // Unparseable JSON is a malformed line; parseable JSON that does
        // not fit the record schema (unknown label, missing field) is an
        // invalid record.
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let record: T = serde_json::from_value(value).map_err(|e| CorpusError::InvalidRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        validate(&record).map_err(|reason| CorpusError::InvalidRecord {
            line: line_no,
            reason,
        })?;
        out.push(record);
    }
    Ok(out)
}

fn check_unique_ids<'a, I: Iterator<Item = &'a str>>(ids: I) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId { id: id.to_string() });
        }
    }
    Ok(())
}

/// Ordered, immutable collection of jailbreak templates.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    records: Vec<TemplateRecord>,
    source_path: Option<PathBuf>,
}

impl TemplateStore {
    /// Loads a templates.jsonl file, preserving line order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let records = read_jsonl(path, TemplateRecord::validate)?;
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: Some(path.to_path_buf()),
        })
    }

    /// Builds a store from in-memory records, applying the same checks
    /// as a file load.
    pub fn from_records(records: Vec<TemplateRecord>) -> Result<Self, CorpusError> {
        for (idx, r) in records.iter().enumerate() {
            r.validate().map_err(|reason| CorpusError::InvalidRecord {
                line: idx + 1,
                reason,
            })?;
        }
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: None,
        })
    }

    /// Parses JSONL content without touching the filesystem.
    pub fn from_jsonl_str(content: &str) -> Result<Self, CorpusError> {
        let records = parse_jsonl(content, TemplateRecord::validate)?;
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: None,
        })
    }

    pub fn records(&self) -> &[TemplateRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&TemplateRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    /// Copy of the store with every template whose family is in
    /// `families` removed. Order of the survivors is unchanged.
    pub fn excluding_families(&self, families: &BTreeSet<String>) -> TemplateStore {
        let records = self
            .records
            .iter()
            .filter(|r| match &r.family {
                Some(f) => !families.contains(f),
                None => true,
            })
            .cloned()
            .collect();
        TemplateStore {
            records,
            source_path: self.source_path.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("template record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Ordered, immutable collection of questions.
#[derive(Debug, Clone)]
pub struct QuestionStore {
    records: Vec<QuestionRecord>,
    source_path: Option<PathBuf>,
}

impl QuestionStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let records = read_jsonl(path, QuestionRecord::validate)?;
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: Some(path.to_path_buf()),
        })
    }

    pub fn from_records(records: Vec<QuestionRecord>) -> Result<Self, CorpusError> {
        for (idx, r) in records.iter().enumerate() {
            r.validate().map_err(|reason| CorpusError::InvalidRecord {
                line: idx + 1,
                reason,
            })?;
        }
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: None,
        })
    }

    pub fn from_jsonl_str(content: &str) -> Result<Self, CorpusError> {
        let records = parse_jsonl(content, QuestionRecord::validate)?;
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self {
            records,
            source_path: None,
        })
    }

    pub fn records(&self) -> &[QuestionRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&QuestionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    /// Deterministically samples one question: uniform over the records
    /// matching `filter` (all records when `None`), keyed by `seed`.
    /// Same store contents, seed, and filter always return the same
    /// record.
    pub fn sample(
        &self,
        seed: u64,
        filter: Option<QuestionLabel>,
    ) -> Result<&QuestionRecord, CorpusError> {
        let candidates: Vec<&QuestionRecord> = self
            .records
            .iter()
            .filter(|r| filter.is_none_or(|f| r.label == f))
            .collect();
        if candidates.is_empty() {
            return Err(CorpusError::EmptyStore);
        }
        let idx = (rng::mix(seed) % candidates.len() as u64) as usize;
        Ok(candidates[idx])
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("question record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}
