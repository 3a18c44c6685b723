//! Config-file schemas for `serve` and `eval`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use repd_core::corpus::QuestionLabel;
use repd_core::evaluator::{default_keywords, load_keywords};
use repd_core::{
    load_attack_corpus, AttackSet, BackendConfig, EvalConfig, PipelineConfig, QuestionRecord,
    QuestionStore, SynonymLexicon, TemplateStore,
};

use crate::CliError;

/// Whether the gateway rewrites refused replies or only annotates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enforcement {
    Observe,
    Enforce,
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_refusal_message() -> String {
    "I'm sorry, I can't help with that request.".to_string()
}

/// `serve --config` file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayFileConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub enforcement: Enforcement,
    #[serde(default = "default_refusal_message")]
    pub refusal_message: String,
    pub templates: PathBuf,
    pub questions: PathBuf,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    pub protected: BackendConfig,
    #[serde(default)]
    pub decoupler: Option<BackendConfig>,
}

impl GatewayFileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| CliError::File(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&content)
            .map_err(|e| CliError::File(format!("invalid config {}: {e}", path.display())))?;
        if cfg.enforcement == Enforcement::Enforce && cfg.refusal_message.trim().is_empty() {
            return Err(CliError::File(
                "enforce mode requires a non-empty refusal_message".to_string(),
            ));
        }
        Ok(cfg)
    }
}

/// One attack corpus entry in an eval config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackFileSpec {
    pub path: PathBuf,
    pub name: String,
    #[serde(default)]
    pub held_out: Vec<String>,
}

/// `eval --config` file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFileConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub templates: PathBuf,
    pub questions: PathBuf,
    pub attacks: Vec<AttackFileSpec>,
    /// Optional separate benign corpus; defaults to the benign-labeled
    /// records of `questions`.
    #[serde(default)]
    pub benign: Option<PathBuf>,
    pub protected: BackendConfig,
    #[serde(default)]
    pub decoupler: Option<BackendConfig>,
    #[serde(default)]
    pub judge: Option<BackendConfig>,
    #[serde(default)]
    pub held_out_families: Vec<String>,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    1
}

pub fn load_lexicon(path: &Option<PathBuf>) -> Result<SynonymLexicon, CliError> {
    match path {
        Some(p) => SynonymLexicon::load(p).map_err(CliError::from_corpus),
        None => Ok(SynonymLexicon::builtin().clone()),
    }
}

pub fn load_keyword_list(path: &Option<PathBuf>) -> Result<Vec<String>, CliError> {
    match path {
        Some(p) => load_keywords(p).map_err(|e| CliError::File(e.to_string())),
        None => Ok(default_keywords()),
    }
}

impl EvalFileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| CliError::File(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&content)
            .map_err(|e| CliError::File(format!("invalid config {}: {e}", path.display())))
    }

    /// Resolves paths and backend configs into a runnable [`EvalConfig`].
    pub fn into_eval_config(self) -> Result<EvalConfig, CliError> {
        let templates = TemplateStore::load(&self.templates).map_err(CliError::from_corpus)?;
        let questions = QuestionStore::load(&self.questions).map_err(CliError::from_corpus)?;
        let benign: Vec<QuestionRecord> = match &self.benign {
            Some(path) => QuestionStore::load(path)
                .map_err(CliError::from_corpus)?
                .records()
                .iter()
                .filter(|q| q.label == QuestionLabel::Benign)
                .cloned()
                .collect(),
            None => questions
                .records()
                .iter()
                .filter(|q| q.label == QuestionLabel::Benign)
                .cloned()
                .collect(),
        };
        let mut attack_sets: Vec<AttackSet> = Vec::new();
        for spec in &self.attacks {
            let held: BTreeSet<String> = spec.held_out.iter().cloned().collect();
            attack_sets.push(
                load_attack_corpus(&spec.path, spec.name.clone(), held)
                    .map_err(CliError::from_corpus)?,
            );
        }
        let keywords = load_keyword_list(&self.keywords)?;
        let lexicon = load_lexicon(&self.synonyms)?;
        let protected: Arc<dyn repd_core::Backend> = self.protected.build();
        let decoupler = self.decoupler.as_ref().map(|c| c.build());
        let judge = self.judge.as_ref().map(|c| c.build());
        Ok(EvalConfig {
            pipeline: self.pipeline,
            templates,
            questions,
            attack_sets,
            benign,
            protected,
            decoupler,
            judge,
            held_out_families: self.held_out_families.into_iter().collect(),
            keywords,
            lexicon,
            parallelism: self.parallelism,
        })
    }
}
