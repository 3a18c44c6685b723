//! Retrieval-based prompt decomposition defense for LLM gateways.
//!
//! The core flow: an incoming user prompt is matched against a database
//! of known jailbreak templates, the closest template is combined with a
//! sampled question into a one-shot decomposition example, and the
//! resulting defense prompt teaches the protected model to state the
//! user's real question before answering — so harmful questions surface
//! and get refused. Scaffold wording can be randomized per request to
//! resist adaptive attacks that assume a static defense prompt.
//!
//! Module map:
//! - [`corpus`] — template and question stores (JSONL)
//! - [`retrieval`] — TF-IDF cosine index over templates
//! - [`composer`] — one-shot example, defense scaffolds, randomization
//! - [`forge`] — attack construction / ingestion for evaluation
//! - [`backend`] — chat backends (OpenAI-compatible HTTP, scripted mock)
//! - [`pipeline`] — single- and multi-agent orchestration
//! - [`evaluator`] — refusal/judge verdicts, ASR/FPR/accuracy metrics

pub mod backend;
pub mod composer;
pub mod corpus;
pub mod evaluator;
pub mod forge;
pub mod hash;
pub mod pipeline;
pub mod retrieval;
pub mod rng;

pub use backend::{
    Backend, BackendConfig, BackendError, BackendReply, ChatMessage, ChatParams, HttpBackend,
    HttpBackendConfig, MockBackend, MockRule, Role,
};
pub use composer::{
    assemble_nonretrieval_prompt, assemble_retrieval_prompt, compose_example, randomize,
    ComposeError, DefensePrompt, OneShotExample, PromptMode, SynonymLexicon,
};
pub use corpus::{
    CorpusError, Encoding, QuestionLabel, QuestionRecord, QuestionStore, TemplateKind,
    TemplateRecord, TemplateStore, PLACEHOLDER,
};
pub use evaluator::{
    classify_refusal, compute_metrics, default_keywords, judge, outcomes_to_jsonl, run_eval,
    EvalConfig, EvalError, EvalOutcome, EvalRun, MetricsReport, OutcomeLogRecord, Split,
    SplitMetrics, Verdict, VerdictMethod,
};
pub use forge::{
    forge_base64, forge_embedding, load_attack_corpus, AttackCategory, AttackSet, ForgeError,
    JailbreakPrompt,
};
pub use pipeline::{
    parse_stated_question, AgentMode, ExtractedQuestion, GuardedResponse, Pipeline, PipelineConfig,
    PipelineError, PipelineHandles,
};
pub use retrieval::{
    similarity, tokenize, RetrievalError, RetrievalIndex, RetrievalResult, SparseVector, UserPrompt,
};
