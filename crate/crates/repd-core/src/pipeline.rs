//! The defense pipeline: retrieve, compose, randomize, query, parse.
//!
//! Two shapes: single-agent (one model both decouples and answers) and
//! multi-agent (a decoupler model extracts the question, an answering
//! model responds to the extracted question only). The pipeline records
//! what happened — it never rewrites the model's reply; enforcement is
//! the gateway's concern.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatMessage};
use crate::composer::{
    assemble_nonretrieval_prompt, assemble_retrieval_prompt, compose_example, randomize,
    ComposeError, DefensePrompt, PromptMode, SynonymLexicon,
};
use crate::corpus::{CorpusError, QuestionLabel, QuestionStore};
use crate::evaluator::classify_refusal;
use crate::hash::fnv1a64_hex;
use crate::retrieval::{RetrievalError, RetrievalIndex, RetrievalResult, UserPrompt};
use crate::rng;

/// Marker instruction appended for single-agent runs, teaching the model
/// the machine-readable question line.
pub const SINGLE_MARKER_INSTRUCTION: &str = "\n\nBegin your response with a single line of the form \"QUESTION: <the user's real question or request>\", then give your official response.";

/// Marker instruction appended for the decoupler agent in multi-agent
/// runs: it must output the question line and nothing else.
pub const MULTI_DECOUPLE_INSTRUCTION: &str = "\n\nOutput only a single line of the form \"QUESTION: <the user's real question or request>\" and nothing else.";

/// Stage-2 scaffold for the answering agent. It sees the extracted
/// question only, never the original jailbreak text.
pub fn answer_prompt(question: &str) -> String {
    format!(
        "Answer the following user question or request. Remember, refuse to generate harmful responses.\n\nQuestion: {question}"
    )
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("multi-agent mode requires a decoupler backend")]
    MissingDecoupler,
    #[error("retrieval mode requires a retrieval index")]
    MissingIndex,
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    Single,
    Multi,
}

/// Behavioural knobs of one pipeline instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PromptMode,
    pub agents: AgentMode,
    pub randomize: bool,
    pub randomize_p: f64,
    pub seed: u64,
    /// Retrieval scores below this switch the request to the
    /// non-retrieval scaffold. 0 means never switch.
    pub min_retrieval_score: f64,
    /// Label filter for the sampled example question.
    pub question_filter: Option<QuestionLabel>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Retrieval,
            agents: AgentMode::Single,
            randomize: true,
            randomize_p: 0.25,
            seed: 0,
            min_retrieval_score: 0.0,
            question_filter: Some(QuestionLabel::Harmful),
        }
    }
}

/// The question a model stated back, if it stated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedQuestion {
    pub text: String,
    pub found: bool,
}

/// Everything the pipeline learned about one request.
#[derive(Debug, Clone)]
pub struct GuardedResponse {
    /// The downstream reply, verbatim.
    pub final_text: String,
    pub extracted: ExtractedQuestion,
    pub refused: bool,
    /// The retrieval outcome, also kept when it fell below the
    /// configured minimum score and the non-retrieval scaffold was used.
    pub retrieval: Option<RetrievalResult>,
    /// FNV-1a fingerprint of the defense prompt actually sent.
    pub defense_prompt_hash: String,
    /// Backend latency per stage, in call order.
    pub latencies: Vec<f64>,
}

/// Immutable handles the pipeline operates over.
pub struct PipelineHandles {
    pub index: Option<RetrievalIndex>,
    pub questions: QuestionStore,
    pub lexicon: SynonymLexicon,
    pub keywords: Vec<String>,
    pub protected: Arc<dyn Backend>,
    pub decoupler: Option<Arc<dyn Backend>>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    index: Option<RetrievalIndex>,
    questions: QuestionStore,
    lexicon: SynonymLexicon,
    keywords: Vec<String>,
    protected: Arc<dyn Backend>,
    decoupler: Option<Arc<dyn Backend>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, handles: PipelineHandles) -> Result<Self, PipelineError> {
        if !(0.0..=1.0).contains(&cfg.randomize_p) {
            return Err(PipelineError::InvalidConfig(format!(
                "randomize_p must be in [0,1], got {}",
                cfg.randomize_p
            )));
        }
        if cfg.agents == AgentMode::Multi && handles.decoupler.is_none() {
            return Err(PipelineError::MissingDecoupler);
        }
        if cfg.mode == PromptMode::Retrieval && handles.index.is_none() {
            return Err(PipelineError::MissingIndex);
        }
        if handles.keywords.is_empty() {
            return Err(PipelineError::InvalidConfig(
                "refusal keyword list must be non-empty".to_string(),
            ));
        }
        Ok(Self {
            cfg,
            index: handles.index,
            questions: handles.questions,
            lexicon: handles.lexicon,
            keywords: handles.keywords,
            protected: handles.protected,
            decoupler: handles.decoupler,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Runs one request with the configured agent mode and no prior
    /// conversation.
    pub fn run(
        &self,
        user: &UserPrompt,
        request_seed: u64,
    ) -> Result<GuardedResponse, PipelineError> {
        self.run_with_history(user, request_seed, &[])
    }

    /// Like [`run`](Self::run), but forwards earlier conversation turns
    /// untouched ahead of the defended last message.
    pub fn run_with_history(
        &self,
        user: &UserPrompt,
        request_seed: u64,
        history: &[ChatMessage],
    ) -> Result<GuardedResponse, PipelineError> {
        match self.cfg.agents {
            AgentMode::Single => self.run_single(user, request_seed, history),
            AgentMode::Multi => self.run_multi(user, request_seed, history),
        }
    }

    /// Single-agent flow: one call to the protected model with the full
    /// decomposition prompt.
    pub fn run_single(
        &self,
        user: &UserPrompt,
        request_seed: u64,
        history: &[ChatMessage],
    ) -> Result<GuardedResponse, PipelineError> {
        let (prompt, retrieval) = self.build_defense_prompt(user, request_seed)?;
        let sent = format!("{}{}", prompt.text, SINGLE_MARKER_INSTRUCTION);
        let hash = fnv1a64_hex(&sent);

        let mut messages: Vec<ChatMessage> = history.to_vec();
        messages.push(ChatMessage::user(sent));
        let reply = self.protected.chat(&messages, &self.protected.params())?;

        let extracted = parse_stated_question(&reply.content);
        let refused = classify_refusal(&reply.content, &self.keywords);
        Ok(GuardedResponse {
            final_text: reply.content,
            extracted,
            refused,
            retrieval,
            defense_prompt_hash: hash,
            latencies: vec![reply.latency_ms],
        })
    }

    /// Multi-agent flow: the decoupler extracts the question, the
    /// protected model answers only the extracted question. If the
    /// decoupler's reply carries no question line, the raw user prompt
    /// is forwarded instead.
    pub fn run_multi(
        &self,
        user: &UserPrompt,
        request_seed: u64,
        history: &[ChatMessage],
    ) -> Result<GuardedResponse, PipelineError> {
        let decoupler = self
            .decoupler
            .as_ref()
            .ok_or(PipelineError::MissingDecoupler)?;

        let (prompt, retrieval) = self.build_defense_prompt(user, request_seed)?;
        let stage1 = format!("{}{}", prompt.text, MULTI_DECOUPLE_INSTRUCTION);
        let hash = fnv1a64_hex(&stage1);

        let reply1 = decoupler.chat(&[ChatMessage::user(stage1)], &decoupler.params())?;
        let extracted = parse_stated_question(&reply1.content);
        let question = if extracted.found {
            extracted.text.clone()
        } else {
            user.text.clone()
        };

        let mut messages: Vec<ChatMessage> = history.to_vec();
        messages.push(ChatMessage::user(answer_prompt(&question)));
        let reply2 = self.protected.chat(&messages, &self.protected.params())?;

        let refused = classify_refusal(&reply2.content, &self.keywords);
        Ok(GuardedResponse {
            final_text: reply2.content,
            extracted,
            refused,
            retrieval,
            defense_prompt_hash: hash,
            latencies: vec![reply1.latency_ms, reply2.latency_ms],
        })
    }

    /// Assembles the (not yet instruction-suffixed) defense prompt and
    /// the retrieval result, honouring the min-score fallback.
    fn build_defense_prompt(
        &self,
        user: &UserPrompt,
        request_seed: u64,
    ) -> Result<(DefensePrompt, Option<RetrievalResult>), PipelineError> {
        let sample_seed = rng::derive(request_seed, 1);
        let randomize_seed = rng::derive(request_seed, 2);

        let (mut prompt, retrieval) = match self.cfg.mode {
            PromptMode::NonRetrieval => (assemble_nonretrieval_prompt(user), None),
            PromptMode::Retrieval => {
                let index = self.index.as_ref().ok_or(PipelineError::MissingIndex)?;
                let result = index.retrieve(user)?;
                if result.score < self.cfg.min_retrieval_score {
                    (assemble_nonretrieval_prompt(user), Some(result))
                } else {
                    let question = self
                        .questions
                        .sample(sample_seed, self.cfg.question_filter)?;
                    let example = compose_example(&result.template, question)?;
                    (assemble_retrieval_prompt(&example, user), Some(result))
                }
            }
        };

        if self.cfg.randomize {
            prompt = randomize(&prompt, &self.lexicon, self.cfg.randomize_p, randomize_seed);
        }
        Ok((prompt, retrieval))
    }
}

/// Scans a reply for the first line starting (case-insensitively) with
/// `QUESTION:` or `THE QUESTION IS:` and returns the rest of that line.
pub fn parse_stated_question(reply: &str) -> ExtractedQuestion {
    const MARKERS: [&str; 2] = ["question:", "the question is:"];
    for line in reply.lines() {
        let line = line.trim_start();
        for marker in MARKERS {
            if line.len() >= marker.len()
                && line.is_char_boundary(marker.len())
                && line[..marker.len()].eq_ignore_ascii_case(marker)
            {
                return ExtractedQuestion {
                    text: line[marker.len()..].trim().to_string(),
                    found: true,
                };
            }
        }
    }
    ExtractedQuestion {
        text: String::new(),
        found: false,
    }
}
