//! Attack construction and ingestion for evaluation runs.
//!
//! Forges template-based jailbreak prompts (plain embedding and base64
//! encoding) and loads pre-generated attack corpora (e.g. adaptive
//! attacks produced elsewhere) from JSONL. Forged corpora use the same
//! schema as ingested ones, so forge output can be replayed through
//! [`load_attack_corpus`].
//!
//! Forging shares the placeholder substitution with the composer, so an
//! attack and the defense's one-shot example are guaranteed to agree on
//! the composed string.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    substitute_placeholder, CorpusError, Encoding, QuestionRecord, TemplateKind, TemplateRecord,
};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("template {id:?} has kind {actual:?}, expected {expected:?}")]
    WrongKind {
        id: String,
        expected: TemplateKind,
        actual: TemplateKind,
    },
    #[error("unsupported template encoding {0:?}")]
    UnsupportedEncoding(String),
}

/// How an attack prompt was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackCategory {
    Embedding,
    Encoding,
    AdaptiveReplay,
}

/// One evaluation attack prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JailbreakPrompt {
    pub text: String,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub category: AttackCategory,
}

impl JailbreakPrompt {
    fn validate(&self) -> Result<(), String> {
        match self.category {
            AttackCategory::Embedding | AttackCategory::Encoding => {
                if self.template_id.is_none() {
                    return Err(format!("category {:?} requires template_id", self.category));
                }
            }
            AttackCategory::AdaptiveReplay => {}
        }
        if self.text.trim().is_empty() {
            return Err("text is empty".to_string());
        }
        Ok(())
    }
}

/// A named attack corpus plus the template families the defender must
/// not index for this run.
#[derive(Debug, Clone)]
pub struct AttackSet {
    pub prompts: Vec<JailbreakPrompt>,
    pub name: String,
    pub held_out_families: BTreeSet<String>,
}

impl AttackSet {
    pub fn new(
        name: impl Into<String>,
        prompts: Vec<JailbreakPrompt>,
        held_out_families: BTreeSet<String>,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                line: 0,
                reason: "attack set name must be non-empty".to_string(),
            });
        }
        Ok(Self {
            prompts,
            name,
            held_out_families,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            out.push_str(&serde_json::to_string(p).expect("attack prompt serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Substitutes a harmful question into an embedding template.
pub fn forge_embedding(
    template: &TemplateRecord,
    question: &QuestionRecord,
) -> Result<JailbreakPrompt, ForgeError> {
    if template.kind != TemplateKind::Embedding {
        return Err(ForgeError::WrongKind {
            id: template.id.clone(),
            expected: TemplateKind::Embedding,
            actual: template.kind,
        });
    }
    Ok(JailbreakPrompt {
        text: substitute_placeholder(&template.text, &question.text),
        question_id: question.id.clone(),
        template_id: Some(template.id.clone()),
        category: AttackCategory::Embedding,
    })
}

/// Base64-encodes a question (RFC 4648 standard alphabet, padded) into
/// an encoding-kind wrapper template.
pub fn forge_base64(
    question: &QuestionRecord,
    wrapper: &TemplateRecord,
) -> Result<JailbreakPrompt, ForgeError> {
    if wrapper.kind != TemplateKind::Encoding {
        return Err(ForgeError::WrongKind {
            id: wrapper.id.clone(),
            expected: TemplateKind::Encoding,
            actual: wrapper.kind,
        });
    }
    if wrapper.encoding != Encoding::Base64 {
        return Err(ForgeError::UnsupportedEncoding(String::from(
            wrapper.encoding.clone(),
        )));
    }
    Ok(JailbreakPrompt {
        text: substitute_placeholder(&wrapper.text, &BASE64.encode(question.text.as_bytes())),
        question_id: question.id.clone(),
        template_id: Some(wrapper.id.clone()),
        category: AttackCategory::Encoding,
    })
}

/// Loads an attacks.jsonl corpus:
/// `{"text","question_id","category","template_id"?}` per line.
pub fn load_attack_corpus(
    path: impl AsRef<Path>,
    name: impl Into<String>,
    held_out: BTreeSet<String>,
) -> Result<AttackSet, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let content = fs::read_to_string(path)?;
    let prompts = parse_attack_jsonl(&content)?;
    AttackSet::new(name, prompts, held_out)
}

/// Parses attack JSONL content without touching the filesystem.
pub fn parse_attack_jsonl(content: &str) -> Result<Vec<JailbreakPrompt>, CorpusError> {
    let mut prompts = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let prompt: JailbreakPrompt =
            serde_json::from_value(value).map_err(|e| CorpusError::InvalidRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        prompt
            .validate()
            .map_err(|reason| CorpusError::InvalidRecord {
                line: line_no,
                reason,
            })?;
        prompts.push(prompt);
    }
    Ok(prompts)
}
