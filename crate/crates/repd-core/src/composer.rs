//! Defense-prompt assembly.
//!
//! Builds the one-shot decomposition example from a retrieved template
//! and a sampled question, fills one of the two shipped scaffolds, and
//! optionally applies seeded synonym randomization to the scaffold
//! wording. Substituted regions (the user prompt, the composed example
//! and its two parts) are tracked as protected byte spans that
//! randomization never touches, so user content survives byte-identical.
//!
//! The scaffold texts are versioned resources; their fingerprint is part
//! of a run's config fingerprint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    substitute_placeholder, CorpusError, Encoding, QuestionRecord, TemplateKind, TemplateRecord,
    PLACEHOLDER,
};
use crate::retrieval::UserPrompt;
use crate::rng;

/// Scaffold used when a retrieved one-shot example is available.
pub const RETRIEVAL_SCAFFOLD: &str = include_str!("../resources/scaffold_retrieval_v1.txt");
/// Scaffold used without retrieval: decouple-and-state only.
pub const NONRETRIEVAL_SCAFFOLD: &str = include_str!("../resources/scaffold_nonretrieval_v1.txt");
/// Version tag of the shipped scaffolds.
pub const SCAFFOLD_VERSION: &str = "v1";

const SYNONYMS_JSONL: &str = include_str!("../resources/synonyms.jsonl");

const SLOT_USER: &str = "$user_prompt";
const SLOT_FULL: &str = "$full_prompt";
const SLOT_TEMPLATE: &str = "$prompt_template";
const SLOT_REQUEST: &str = "$prompt_request";

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("unsupported template encoding {0:?}")]
    UnsupportedEncoding(String),
}

/// Which scaffold a defense prompt was assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Retrieval,
    NonRetrieval,
}

/// A composed jailbreak example and its decomposition, shown to the
/// protected model so it learns to decouple the incoming prompt the
/// same way.
#[derive(Debug, Clone, PartialEq)]
pub struct OneShotExample {
    /// Template with the question substituted in (encoded for encoding
    /// templates), i.e. what an attacker would actually send.
    pub full_prompt: String,
    /// Template text with the question slot removed.
    pub template_part: String,
    /// The question in plain text, even for encoding templates, so the
    /// example teaches decoding.
    pub question_part: String,
}

/// Builds the one-shot example for `(template, question)`.
pub fn compose_example(
    template: &TemplateRecord,
    question: &QuestionRecord,
) -> Result<OneShotExample, ComposeError> {
    let full_prompt = match (template.kind, &template.encoding) {
        (TemplateKind::Embedding, _) => substitute_placeholder(&template.text, &question.text),
        (TemplateKind::Encoding, Encoding::Base64) => {
            substitute_placeholder(&template.text, &BASE64.encode(question.text.as_bytes()))
        }
        (TemplateKind::Encoding, other) => {
            return Err(ComposeError::UnsupportedEncoding(String::from(
                other.clone(),
            )))
        }
    };
    Ok(OneShotExample {
        full_prompt,
        template_part: strip_placeholder(&template.text),
        question_part: question.text.clone(),
    })
}

/// Removes the question slot from a template, collapsing the doubled
/// whitespace the removal leaves behind and trimming the ends.
pub fn strip_placeholder(text: &str) -> String {
    match text.find(PLACEHOLDER) {
        None => text.trim().to_string(),
        Some(idx) => {
            let before = &text[..idx];
            let after = &text[idx + PLACEHOLDER.len()..];
            let after = if before.ends_with(|c: char| c.is_whitespace()) {
                after.trim_start()
            } else {
                after
            };
            let mut joined = String::with_capacity(before.len() + after.len());
            joined.push_str(before);
            joined.push_str(after);
            joined.trim().to_string()
        }
    }
}

/// A fully assembled defense prompt plus the byte spans that carry
/// substituted content and must survive randomization untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct DefensePrompt {
    pub text: String,
    pub mode: PromptMode,
    /// Seed used by the last randomization pass (0 until randomized).
    pub seed: u64,
    /// Disjoint (start, end) byte ranges covering every substituted
    /// region, sorted by start.
    pub protected_spans: Vec<(usize, usize)>,
}

impl DefensePrompt {
    /// The protected slices, in span order.
    pub fn protected_slices(&self) -> Vec<&str> {
        self.protected_spans
            .iter()
            .map(|&(s, e)| &self.text[s..e])
            .collect()
    }
}

struct Slot {
    marker: &'static str,
    value: String,
}

/// Positional substitution: each marker is located in the scaffold text
/// itself, never in substituted values, so user content containing a
/// marker literal survives untouched.
fn fill_scaffold(scaffold: &str, mode: PromptMode, slots: Vec<Slot>) -> DefensePrompt {
    let mut positions: Vec<(usize, &Slot)> = slots
        .iter()
        .map(|slot| {
            let pos = scaffold
                .find(slot.marker)
                .unwrap_or_else(|| panic!("scaffold is missing marker {}", slot.marker));
            (pos, slot)
        })
        .collect();
    positions.sort_by_key(|&(pos, _)| pos);

    let mut text = String::with_capacity(scaffold.len());
    let mut spans = Vec::with_capacity(positions.len());
    let mut cursor = 0usize;
    for (pos, slot) in positions {
        text.push_str(&scaffold[cursor..pos]);
        let start = text.len();
        text.push_str(&slot.value);
        spans.push((start, text.len()));
        cursor = pos + slot.marker.len();
    }
    text.push_str(&scaffold[cursor..]);

    DefensePrompt {
        text,
        mode,
        seed: 0,
        protected_spans: spans,
    }
}

/// Fills the retrieval scaffold with the one-shot example and the user
/// prompt. The user text appears exactly once, under the closing
/// `User prompt:` header.
pub fn assemble_retrieval_prompt(example: &OneShotExample, user: &UserPrompt) -> DefensePrompt {
    fill_scaffold(
        RETRIEVAL_SCAFFOLD,
        PromptMode::Retrieval,
        vec![
            Slot {
                marker: SLOT_FULL,
                value: example.full_prompt.clone(),
            },
            Slot {
                marker: SLOT_TEMPLATE,
                value: example.template_part.clone(),
            },
            Slot {
                marker: SLOT_REQUEST,
                value: example.question_part.clone(),
            },
            Slot {
                marker: SLOT_USER,
                value: user.text.clone(),
            },
        ],
    )
}

/// Fills the non-retrieval scaffold with the user prompt only.
pub fn assemble_nonretrieval_prompt(user: &UserPrompt) -> DefensePrompt {
    fill_scaffold(
        NONRETRIEVAL_SCAFFOLD,
        PromptMode::NonRetrieval,
        vec![Slot {
            marker: SLOT_USER,
            value: user.text.clone(),
        }],
    )
}

/// Word → replacement candidates for scaffold randomization.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LexiconRecord {
    word: String,
    alts: Vec<String>,
}

impl SynonymLexicon {
    /// The lexicon shipped with the crate.
    pub fn builtin() -> &'static SynonymLexicon {
        static BUILTIN: OnceLock<SynonymLexicon> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            SynonymLexicon::from_jsonl_str(SYNONYMS_JSONL)
                .expect("shipped synonym lexicon is valid")
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CorpusError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let content = std::fs::read_to_string(path)?;
        Self::from_jsonl_str(&content)
    }

    pub fn from_jsonl_str(content: &str) -> Result<Self, CorpusError> {
        let mut entries = BTreeMap::new();
        for (idx, line) in content.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let record: LexiconRecord =
                serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedLine {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let invalid = |reason: String| CorpusError::InvalidRecord {
                line: line_no,
                reason,
            };
            if record.alts.is_empty() {
                return Err(invalid("alts must be non-empty".to_string()));
            }
            if record.alts.iter().all(|a| *a == record.word) {
                return Err(invalid(format!("{:?} maps only to itself", record.word)));
            }
            if let Some(bad) = record
                .alts
                .iter()
                .find(|a| a.is_empty() || a.chars().any(|c| c.is_whitespace()))
            {
                return Err(invalid(format!(
                    "replacement {bad:?} must be a single non-empty word"
                )));
            }
            let word = record.word.to_lowercase();
            if entries.insert(word.clone(), record.alts).is_some() {
                return Err(CorpusError::DuplicateId { id: word });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scaffold words (outside protected spans) that have a
    /// lexicon entry, i.e. the replacement opportunity count k.
    pub fn coverage(&self, prompt: &DefensePrompt) -> usize {
        let mut k = 0;
        for_each_unprotected_word(prompt, |word| {
            if self.get(&word.to_lowercase()).is_some() {
                k += 1;
            }
        });
        k
    }
}

fn for_each_unprotected_word(prompt: &DefensePrompt, mut f: impl FnMut(&str)) {
    let mut cursor = 0usize;
    for &(start, end) in &prompt.protected_spans {
        for word in words_of(&prompt.text[cursor..start]) {
            f(word);
        }
        cursor = end;
    }
    for word in words_of(&prompt.text[cursor..]) {
        f(word);
    }
}

fn words_of(segment: &str) -> impl Iterator<Item = &str> {
    segment
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
}

/// Rewrites scaffold words with synonyms, each with probability `p`.
///
/// Scaffold words are scanned left to right; the decision and the pick
/// for word index i are keyed by `(seed, i)`, so a given input is
/// rewritten identically every time. First-letter capitalization is
/// preserved. Protected spans pass through byte-identical and the
/// returned prompt carries their re-offset ranges.
pub fn randomize(
    prompt: &DefensePrompt,
    lexicon: &SynonymLexicon,
    p: f64,
    seed: u64,
) -> DefensePrompt {
    debug_assert!((0.0..=1.0).contains(&p), "p must be in [0,1]");
    let mut out = String::with_capacity(prompt.text.len());
    let mut new_spans = Vec::with_capacity(prompt.protected_spans.len());
    let mut word_index = 0u64;

    let mut cursor = 0usize;
    for &(start, end) in &prompt.protected_spans {
        rewrite_segment(
            &prompt.text[cursor..start],
            lexicon,
            p,
            seed,
            &mut word_index,
            &mut out,
        );
        let new_start = out.len();
        out.push_str(&prompt.text[start..end]);
        new_spans.push((new_start, out.len()));
        cursor = end;
    }
    rewrite_segment(
        &prompt.text[cursor..],
        lexicon,
        p,
        seed,
        &mut word_index,
        &mut out,
    );

    DefensePrompt {
        text: out,
        mode: prompt.mode,
        seed,
        protected_spans: new_spans,
    }
}

fn rewrite_segment(
    segment: &str,
    lexicon: &SynonymLexicon,
    p: f64,
    seed: u64,
    word_index: &mut u64,
    out: &mut String,
) {
    let mut rest = segment;
    while !rest.is_empty() {
        match rest.find(|c: char| c.is_alphanumeric()) {
            None => {
                out.push_str(rest);
                return;
            }
            Some(start) => {
                out.push_str(&rest[..start]);
                let tail = &rest[start..];
                let len = tail
                    .find(|c: char| !c.is_alphanumeric())
                    .unwrap_or(tail.len());
                let word = &tail[..len];
                out.push_str(&replacement_for(word, lexicon, p, seed, *word_index));
                *word_index += 1;
                rest = &tail[len..];
            }
        }
    }
}

fn replacement_for(
    word: &str,
    lexicon: &SynonymLexicon,
    p: f64,
    seed: u64,
    word_index: u64,
) -> String {
    let lower = word.to_lowercase();
    let Some(alts) = lexicon.get(&lower) else {
        return word.to_string();
    };
    if !rng::coin(seed, word_index, p) {
        return word.to_string();
    }
    let pick = &alts[rng::pick(seed, word_index, alts.len())];
    match word.chars().next() {
        Some(first) if first.is_uppercase() => {
            let mut chars = pick.chars();
            match chars.next() {
                Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
                None => pick.clone(),
            }
        }
        _ => pick.clone(),
    }
}
