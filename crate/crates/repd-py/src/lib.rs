//! Python bindings for the defense core.
//!
//! Exposes the corpora, the retrieval index, prompt assembly and
//! randomization, attack forging, refusal classification, and a full
//! pipeline whose backends are plain Python callables
//! (`prompt_text -> reply_text`), so any Python LLM client can sit
//! behind the defense.
//!
//! Build with `cargo build -p repd-py`, then import the produced
//! `librepd.so` as module `repd` (see python/smoke_test.py).

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use repd_core::backend::{Backend, BackendError, BackendReply, ChatMessage, ChatParams};
use repd_core::composer::{OneShotExample, PromptMode};
use repd_core::corpus::QuestionLabel;
use repd_core::pipeline::{AgentMode, PipelineConfig, PipelineHandles};
use repd_core::SynonymLexicon;

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct TemplateStore {
    inner: repd_core::TemplateStore,
}

#[pymethods]
impl TemplateStore {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: repd_core::TemplateStore::load(path).map_err(io_err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(content: &str) -> PyResult<Self> {
        Ok(Self {
            inner: repd_core::TemplateStore::from_jsonl_str(content).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.id.clone()).collect()
    }

    fn text_of(&self, id: &str) -> PyResult<String> {
        self.inner
            .get(id)
            .map(|r| r.text.clone())
            .ok_or_else(|| value_err(format!("no template {id:?}")))
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct QuestionStore {
    inner: repd_core::QuestionStore,
}

#[pymethods]
impl QuestionStore {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: repd_core::QuestionStore::load(path).map_err(io_err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(content: &str) -> PyResult<Self> {
        Ok(Self {
            inner: repd_core::QuestionStore::from_jsonl_str(content).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.id.clone()).collect()
    }

    /// Deterministically samples (id, text, label) for a seed.
    #[pyo3(signature = (seed, label=None))]
    fn sample(&self, seed: u64, label: Option<&str>) -> PyResult<(String, String, String)> {
        let filter = parse_label(label)?;
        let q = self.inner.sample(seed, filter).map_err(value_err)?;
        Ok((
            q.id.clone(),
            q.text.clone(),
            match q.label {
                QuestionLabel::Harmful => "harmful".to_string(),
                QuestionLabel::Benign => "benign".to_string(),
            },
        ))
    }
}

fn parse_label(label: Option<&str>) -> PyResult<Option<QuestionLabel>> {
    match label {
        None | Some("none") => Ok(None),
        Some("harmful") => Ok(Some(QuestionLabel::Harmful)),
        Some("benign") => Ok(Some(QuestionLabel::Benign)),
        Some(other) => Err(value_err(format!("unknown label {other:?}"))),
    }
}

#[pyclass]
struct RetrievalHit {
    #[pyo3(get)]
    template_id: String,
    #[pyo3(get)]
    score: f64,
    #[pyo3(get)]
    decoded_prompt: Option<String>,
}

#[pyclass]
struct RetrievalIndex {
    inner: repd_core::RetrievalIndex,
}

#[pymethods]
impl RetrievalIndex {
    #[staticmethod]
    fn build(store: &TemplateStore) -> PyResult<Self> {
        Ok(Self {
            inner: repd_core::RetrievalIndex::build(store.inner.clone()).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn retrieve(&self, text: &str) -> PyResult<RetrievalHit> {
        let prompt = repd_core::UserPrompt::new(text).map_err(value_err)?;
        let result = self.inner.retrieve(&prompt).map_err(value_err)?;
        Ok(RetrievalHit {
            template_id: result.template.id,
            score: result.score,
            decoded_prompt: result.decoded_prompt,
        })
    }
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct DefensePrompt {
    inner: repd_core::DefensePrompt,
}

#[pymethods]
impl DefensePrompt {
    #[getter]
    fn text(&self) -> String {
        self.inner.text.clone()
    }

    #[getter]
    fn mode(&self) -> String {
        match self.inner.mode {
            PromptMode::Retrieval => "retrieval".to_string(),
            PromptMode::NonRetrieval => "non_retrieval".to_string(),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn protected_spans(&self) -> Vec<(usize, usize)> {
        self.inner.protected_spans.clone()
    }

    fn protected_slices(&self) -> Vec<String> {
        self.inner
            .protected_slices()
            .into_iter()
            .map(str::to_string)
            .collect()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    repd_core::tokenize(text)
}

#[pyfunction]
fn fnv1a64(text: &str) -> String {
    repd_core::hash::fnv1a64_hex(text)
}

#[pyfunction]
#[pyo3(signature = (text, keywords=None))]
fn classify_refusal(text: &str, keywords: Option<Vec<String>>) -> bool {
    let keywords = keywords.unwrap_or_else(repd_core::default_keywords);
    repd_core::classify_refusal(text, &keywords)
}

#[pyfunction]
fn default_keywords() -> Vec<String> {
    repd_core::default_keywords()
}

/// Returns (found, question_text).
#[pyfunction]
fn parse_stated_question(reply: &str) -> (bool, String) {
    let e = repd_core::parse_stated_question(reply);
    (e.found, e.text)
}

/// Returns (full_prompt, template_part, question_part).
#[pyfunction]
fn compose_example(
    templates: &TemplateStore,
    template_id: &str,
    questions: &QuestionStore,
    question_id: &str,
) -> PyResult<(String, String, String)> {
    let t = templates
        .inner
        .get(template_id)
        .ok_or_else(|| value_err(format!("no template {template_id:?}")))?;
    let q = questions
        .inner
        .get(question_id)
        .ok_or_else(|| value_err(format!("no question {question_id:?}")))?;
    let ex = repd_core::compose_example(t, q).map_err(value_err)?;
    Ok((ex.full_prompt, ex.template_part, ex.question_part))
}

#[pyfunction]
fn assemble_retrieval_prompt(
    full_prompt: &str,
    template_part: &str,
    question_part: &str,
    user_text: &str,
) -> PyResult<DefensePrompt> {
    let user = repd_core::UserPrompt::new(user_text).map_err(value_err)?;
    let example = OneShotExample {
        full_prompt: full_prompt.to_string(),
        template_part: template_part.to_string(),
        question_part: question_part.to_string(),
    };
    Ok(DefensePrompt {
        inner: repd_core::assemble_retrieval_prompt(&example, &user),
    })
}

#[pyfunction]
fn assemble_nonretrieval_prompt(user_text: &str) -> PyResult<DefensePrompt> {
    let user = repd_core::UserPrompt::new(user_text).map_err(value_err)?;
    Ok(DefensePrompt {
        inner: repd_core::assemble_nonretrieval_prompt(&user),
    })
}

#[pyfunction]
#[pyo3(signature = (prompt, p, seed, synonyms_path=None))]
fn randomize(
    prompt: &DefensePrompt,
    p: f64,
    seed: u64,
    synonyms_path: Option<&str>,
) -> PyResult<DefensePrompt> {
    if !(0.0..=1.0).contains(&p) {
        return Err(value_err("p must be in [0, 1]"));
    }
    let lexicon = match synonyms_path {
        Some(path) => SynonymLexicon::load(path).map_err(io_err)?,
        None => SynonymLexicon::builtin().clone(),
    };
    Ok(DefensePrompt {
        inner: repd_core::randomize(&prompt.inner, &lexicon, p, seed),
    })
}

#[pyfunction]
fn forge_embedding(
    templates: &TemplateStore,
    template_id: &str,
    questions: &QuestionStore,
    question_id: &str,
) -> PyResult<String> {
    let t = templates
        .inner
        .get(template_id)
        .ok_or_else(|| value_err(format!("no template {template_id:?}")))?;
    let q = questions
        .inner
        .get(question_id)
        .ok_or_else(|| value_err(format!("no question {question_id:?}")))?;
    Ok(repd_core::forge_embedding(t, q).map_err(value_err)?.text)
}

#[pyfunction]
fn forge_base64(
    templates: &TemplateStore,
    template_id: &str,
    questions: &QuestionStore,
    question_id: &str,
) -> PyResult<String> {
    let t = templates
        .inner
        .get(template_id)
        .ok_or_else(|| value_err(format!("no template {template_id:?}")))?;
    let q = questions
        .inner
        .get(question_id)
        .ok_or_else(|| value_err(format!("no question {question_id:?}")))?;
    Ok(repd_core::forge_base64(q, t).map_err(value_err)?.text)
}

/// Backend adapter around a Python callable `prompt_text -> reply_text`.
struct CallbackBackend {
    name: String,
    callback: Py<PyAny>,
}

impl Backend for CallbackBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn chat(
        &self,
        messages: &[ChatMessage],
        _params: &ChatParams,
    ) -> Result<BackendReply, BackendError> {
        repd_core::backend::validate_messages(messages)?;
        let last = messages
            .last()
            .map(|m| m.content.clone())
            .unwrap_or_default();
        Python::attach(|py| {
            let reply =
                self.callback.bind(py).call1((last,)).map_err(|e| {
                    BackendError::Transport(format!("python responder raised: {e}"))
                })?;
            let content: String = reply
                .extract()
                .map_err(|e| BackendError::Protocol(format!("responder must return str: {e}")))?;
            Ok(BackendReply {
                content,
                latency_ms: 0.0,
                backend_id: self.name.clone(),
                token_counts: None,
            })
        })
    }
}

#[pyclass]
struct GuardedResult {
    #[pyo3(get)]
    final_text: String,
    #[pyo3(get)]
    refused: bool,
    #[pyo3(get)]
    extracted_question: String,
    #[pyo3(get)]
    extracted_found: bool,
    #[pyo3(get)]
    retrieval_template_id: Option<String>,
    #[pyo3(get)]
    retrieval_score: Option<f64>,
    #[pyo3(get)]
    decoded_prompt: Option<String>,
    #[pyo3(get)]
    defense_prompt_hash: String,
    #[pyo3(get)]
    latencies_ms: Vec<f64>,
}

/// The full defense pipeline driven by Python responders.
#[pyclass]
struct Pipeline {
    inner: repd_core::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (
        templates, questions, responder, *,
        decoupler=None, mode="retrieval", agents="single",
        randomize=true, randomize_p=0.25, seed=0,
        min_retrieval_score=0.0, question_filter="harmful",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        templates: &TemplateStore,
        questions: &QuestionStore,
        responder: Py<PyAny>,
        decoupler: Option<Py<PyAny>>,
        mode: &str,
        agents: &str,
        randomize: bool,
        randomize_p: f64,
        seed: u64,
        min_retrieval_score: f64,
        question_filter: Option<&str>,
    ) -> PyResult<Self> {
        let mode = match mode {
            "retrieval" => PromptMode::Retrieval,
            "non_retrieval" => PromptMode::NonRetrieval,
            other => return Err(value_err(format!("unknown mode {other:?}"))),
        };
        let agents = match agents {
            "single" => AgentMode::Single,
            "multi" => AgentMode::Multi,
            other => return Err(value_err(format!("unknown agents {other:?}"))),
        };
        let index = match mode {
            PromptMode::Retrieval => {
                Some(repd_core::RetrievalIndex::build(templates.inner.clone()).map_err(value_err)?)
            }
            PromptMode::NonRetrieval => None,
        };
        let cfg = PipelineConfig {
            mode,
            agents,
            randomize,
            randomize_p,
            seed,
            min_retrieval_score,
            question_filter: parse_label(question_filter)?,
        };
        let protected: Arc<dyn Backend> = Arc::new(CallbackBackend {
            name: "python-responder".to_string(),
            callback: responder,
        });
        let decoupler: Option<Arc<dyn Backend>> = decoupler.map(|cb| {
            Arc::new(CallbackBackend {
                name: "python-decoupler".to_string(),
                callback: cb,
            }) as Arc<dyn Backend>
        });
        let inner = repd_core::Pipeline::new(
            cfg,
            PipelineHandles {
                index,
                questions: questions.inner.clone(),
                lexicon: SynonymLexicon::builtin().clone(),
                keywords: repd_core::default_keywords(),
                protected,
                decoupler,
            },
        )
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Defends one user prompt and returns the guarded result.
    #[pyo3(signature = (text, request_seed=0))]
    fn run(&self, text: &str, request_seed: u64) -> PyResult<GuardedResult> {
        let user = repd_core::UserPrompt::new(text).map_err(value_err)?;
        let resp = self
            .inner
            .run(&user, request_seed)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(GuardedResult {
            final_text: resp.final_text,
            refused: resp.refused,
            extracted_question: resp.extracted.text,
            extracted_found: resp.extracted.found,
            retrieval_template_id: resp.retrieval.as_ref().map(|r| r.template.id.clone()),
            retrieval_score: resp.retrieval.as_ref().map(|r| r.score),
            decoded_prompt: resp.retrieval.and_then(|r| r.decoded_prompt),
            defense_prompt_hash: resp.defense_prompt_hash,
            latencies_ms: resp.latencies,
        })
    }
}

#[pymodule]
fn repd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TemplateStore>()?;
    m.add_class::<QuestionStore>()?;
    m.add_class::<RetrievalIndex>()?;
    m.add_class::<RetrievalHit>()?;
    m.add_class::<DefensePrompt>()?;
    m.add_class::<Pipeline>()?;
    m.add_class::<GuardedResult>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(fnv1a64, m)?)?;
    m.add_function(wrap_pyfunction!(classify_refusal, m)?)?;
    m.add_function(wrap_pyfunction!(default_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(parse_stated_question, m)?)?;
    m.add_function(wrap_pyfunction!(compose_example, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_retrieval_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_nonretrieval_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(randomize, m)?)?;
    m.add_function(wrap_pyfunction!(forge_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(forge_base64, m)?)?;
    Ok(())
}
