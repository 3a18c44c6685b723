//! Lexical retrieval over the template store.
//!
//! A TF-IDF index over word unigrams with cosine scoring: deterministic,
//! dependency-free, and fast enough for template-scale corpora. The
//! index is immutable after build; rebuilds produce a new value.
//!
//! Incoming prompts that look like one long base64 blob are additionally
//! scored in decoded form, so encoded attacks can still match plain-text
//! templates (see [`RetrievalIndex::retrieve`]).

use std::collections::{BTreeMap, HashMap};
use std::time::SystemTime;

use base64::engine::general_purpose::{STANDARD as BASE64, STANDARD_NO_PAD as BASE64_NO_PAD};
use base64::Engine;
use thiserror::Error;

use crate::corpus::{TemplateRecord, TemplateStore, PLACEHOLDER};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty template store")]
    EmptyStore,
    #[error("retrieval index contains no templates")]
    EmptyIndex,
    #[error("user prompt text is empty")]
    EmptyPrompt,
}

/// A user prompt entering the defense.
#[derive(Debug, Clone)]
pub struct UserPrompt {
    pub text: String,
    pub received_at: SystemTime,
}

impl UserPrompt {
    pub fn new(text: impl Into<String>) -> Result<Self, RetrievalError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyPrompt);
        }
        Ok(Self {
            text,
            received_at: SystemTime::now(),
        })
    }
}

/// Lowercases and splits on every maximal run of non-alphanumeric
/// characters. The `{QUESTION}` placeholder is dropped before splitting
/// so template slots never contribute tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned = text.replace(PLACEHOLDER, "");
    cleaned
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Sparse vector keyed by token id. Entries are strictly positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    entries: BTreeMap<u32, f64>,
}

impl SparseVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `weight` to the entry for `token_id`. Non-positive weights
    /// are ignored so no explicit zero entries exist.
    pub fn add(&mut self, token_id: u32, weight: f64) {
        if weight > 0.0 {
            *self.entries.entry(token_id).or_insert(0.0) += weight;
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        // iterate the smaller side
        let (small, large) = if self.entries.len() <= other.entries.len() {
            (&self.entries, &other.entries)
        } else {
            (&other.entries, &self.entries)
        };
        small
            .iter()
            .filter_map(|(k, v)| large.get(k).map(|w| v * w))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit L2 norm; a zero vector stays zero.
    pub fn normalized(mut self) -> SparseVector {
        let n = self.norm();
        if n > 0.0 {
            for v in self.entries.values_mut() {
                *v /= n;
            }
        }
        self
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn similarity(a: &SparseVector, b: &SparseVector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Outcome of matching a prompt against the template store.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub template: TemplateRecord,
    /// Cosine score in [0, 1].
    pub score: f64,
    /// Set when the prompt was recognized as base64 and the decoded text
    /// scored higher than the raw text.
    pub decoded_prompt: Option<String>,
}

/// TF-IDF index over a template store.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    vocabulary: HashMap<String, u32>,
    idf: Vec<f64>,
    template_vectors: Vec<SparseVector>,
    store: TemplateStore,
}

impl RetrievalIndex {
    /// Builds the index: idf(t) = ln((1+N)/(1+df(t))) + 1, template
    /// weights tf·idf, each vector L2-normalized.
    pub fn build(store: TemplateStore) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let token_lists: Vec<Vec<String>> =
            store.records().iter().map(|t| tokenize(&t.text)).collect();

        // vocabulary in first-seen order, document frequencies per token
        let mut vocabulary: HashMap<String, u32> = HashMap::new();
        let mut df: Vec<u32> = Vec::new();
        for tokens in &token_lists {
            let mut seen_here: Vec<u32> = Vec::new();
            for tok in tokens {
                let next_id = vocabulary.len() as u32;
                let id = *vocabulary.entry(tok.clone()).or_insert(next_id);
                if id as usize == df.len() {
                    df.push(0);
                }
                if !seen_here.contains(&id) {
                    seen_here.push(id);
                    df[id as usize] += 1;
                }
            }
        }

        let n = store.len() as f64;
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();

        let template_vectors: Vec<SparseVector> = token_lists
            .iter()
            .map(|tokens| {
                let mut v = SparseVector::new();
                let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
                for tok in tokens {
                    *tf.entry(vocabulary[tok]).or_insert(0.0) += 1.0;
                }
                for (id, count) in tf {
                    v.add(id, count * idf[id as usize]);
                }
                v.normalized()
            })
            .collect();

        Ok(Self {
            vocabulary,
            idf,
            template_vectors,
            store,
        })
    }

    pub fn store(&self) -> &TemplateStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.template_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_vectors.is_empty()
    }

    /// The L2-normalized vector for template `idx`, in store order.
    pub fn template_vector(&self, idx: usize) -> Option<&SparseVector> {
        self.template_vectors.get(idx)
    }

    /// Vectorizes free text against the index vocabulary: tf·idf over
    /// known tokens, L2-normalized. Unknown tokens contribute nothing.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        let mut v = SparseVector::new();
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(&id) = self.vocabulary.get(&tok) {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        for (id, count) in tf {
            v.add(id, count * self.idf[id as usize]);
        }
        v.normalized()
    }

    /// Returns the template with maximal cosine similarity to the
    /// prompt. Ties (including the all-zero case) go to the
    /// lexicographically smallest template id.
    ///
    /// If the prompt is essentially one base64 run that decodes to
    /// UTF-8, the decoded text is scored as well and the higher-scoring
    /// interpretation wins, with `decoded_prompt` set when the decoded
    /// side is kept.
    pub fn retrieve(&self, prompt: &UserPrompt) -> Result<RetrievalResult, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let (raw_idx, raw_score) = self.best_match(&self.vectorize(&prompt.text));
        if let Some(decoded) = decode_base64_prompt(&prompt.text) {
            let (dec_idx, dec_score) = self.best_match(&self.vectorize(&decoded));
            if dec_score > raw_score {
                return Ok(RetrievalResult {
                    template: self.store.records()[dec_idx].clone(),
                    score: dec_score.clamp(0.0, 1.0),
                    decoded_prompt: Some(decoded),
                });
            }
        }
        Ok(RetrievalResult {
            template: self.store.records()[raw_idx].clone(),
            score: raw_score.clamp(0.0, 1.0),
            decoded_prompt: None,
        })
    }

    fn best_match(&self, query: &SparseVector) -> (usize, f64) {
        let records = self.store.records();
        let mut best_idx = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, tv) in self.template_vectors.iter().enumerate() {
            // both sides are normalized, so the dot product is the cosine
            let score = query.dot(tv);
            let better = score > best_score
                || (score == best_score && records[idx].id < records[best_idx].id);
            if better {
                best_idx = idx;
                best_score = score;
            }
        }
        (best_idx, best_score.max(0.0))
    }
}

/// Detects a prompt that is essentially one base64 payload and decodes
/// it: the longest contiguous base64-alphabet run must cover at least
/// 80% of the prompt's non-whitespace bytes, be at least 16 bytes long,
/// and decode to valid UTF-8.
pub fn decode_base64_prompt(text: &str) -> Option<String> {
    let run = longest_base64_run(text)?;
    if run.len() < 16 {
        return None;
    }
    let non_ws = text.bytes().filter(|b| !b.is_ascii_whitespace()).count();
    if (run.len() as f64) < 0.8 * non_ws as f64 {
        return None;
    }
    let bytes = if run.contains('=') || run.len() % 4 == 0 {
        BASE64.decode(run).ok()?
    } else {
        BASE64_NO_PAD.decode(run).ok()?
    };
    String::from_utf8(bytes).ok()
}

fn is_base64_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'+' || c == b'/'
}

fn longest_base64_run(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < bytes.len() {
        if is_base64_char(bytes[i]) {
            let start = i;
            while i < bytes.len() && is_base64_char(bytes[i]) {
                i += 1;
            }
            // allow up to two trailing padding chars
            let mut end = i;
            while end < bytes.len() && bytes[end] == b'=' && end - i < 2 {
                end += 1;
            }
            i = end;
            if best.is_none_or(|(s, e)| end - start > e - s) {
                best = Some((start, end));
            }
        } else {
            i += 1;
        }
    }
    best.map(|(s, e)| &text[s..e])
}
