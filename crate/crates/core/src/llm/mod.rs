//! Chat-completion and embedding client layer: templates, backends, retries,
//! concurrency limiting and per-call provenance.

pub mod mock;
pub mod template;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DemandValidity;
use crate::retry::{with_retry, BackendError, RetryPolicy};
pub use mock::{MockChat, MockEmbed};
pub use template::{FewShot, Message, PromptTemplate, Task, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("backend returned empty output for template {template_id}")]
    EmptyOutput { template_id: String },
    #[error("template {template_id} is for task {found}, expected {expected}")]
    WrongTask {
        template_id: String,
        expected: Task,
        found: Task,
    },
    #[error("{count} candidates given, expected 1..={max}")]
    CandidateCount { count: usize, max: usize },
    #[error("embedding has {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding value {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{source} (after {attempts} attempts)")]
    Backend { source: BackendError, attempts: u32 },
}

/// What a chat backend receives: the rendered messages for remote services,
/// plus the raw inputs so offline backends need not parse prompts.
pub struct ChatRequest<'a> {
    pub template: &'a PromptTemplate,
    pub messages: &'a [Message],
    pub vars: &'a BTreeMap<&'a str, String>,
    pub candidates: &'a [String],
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, BackendError>;
    fn name(&self) -> &str;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;
    fn model_tag(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub template_id: String,
    pub version: String,
    pub rendered_messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ExchangeRequest,
    pub response: ExchangeResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub exchange: ChatExchange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub validity: DemandValidity,
    pub reason: Option<String>,
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Strips whitespace and matching surrounding quotes, repeatedly.
pub fn strip_quotes(text: &str) -> &str {
    let mut s = text.trim();
    loop {
        let mut chars = s.chars();
        let (Some(first), Some(last)) = (chars.next(), chars.next_back()) else {
            return s;
        };
        let pair = matches!(
            (first, last),
            ('"', '"') | ('\'', '\'') | ('“', '”') | ('«', '»') | ('‘', '’') | ('`', '`')
        );
        if !pair {
            return s;
        }
        s = s[first.len_utf8()..s.len() - last.len_utf8()].trim();
    }
}

/// Shared client: one per run, usable from many worker threads.
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbedBackend>,
    retry: RetryPolicy,
    dim: usize,
    limiter: Limiter,
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn EmbedBackend>,
        retry: RetryPolicy,
        dim: usize,
        max_concurrent_requests: usize,
    ) -> Self {
        Self {
            chat,
            embedder,
            retry,
            dim,
            limiter: Limiter::new(max_concurrent_requests),
        }
    }

    /// All-mock gateway, as used by tests and offline runs.
    pub fn mock(dim: usize, seed: u64) -> Self {
        Self::new(
            Arc::new(MockChat),
            Arc::new(MockEmbed::new(dim, seed)),
            RetryPolicy::default(),
            dim,
            4,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    fn expect_task(t: &PromptTemplate, task: Task) -> Result<(), LlmError> {
        if t.task != task {
            return Err(LlmError::WrongTask {
                template_id: t.template_id.clone(),
                expected: task,
                found: t.task,
            });
        }
        Ok(())
    }

    fn call(
        &self,
        template: &PromptTemplate,
        vars: BTreeMap<&str, String>,
        candidates: &[String],
    ) -> Result<Generated, LlmError> {
        let messages = template.render(&vars)?;
        let req = ChatRequest {
            template,
            messages: &messages,
            vars: &vars,
            candidates,
        };
        let started = Instant::now();
        let result = {
            let _permit = self.limiter.acquire();
            with_retry(&self.retry, |_| self.chat.complete(&req))
        };
        let done = result.map_err(|(source, attempts)| LlmError::Backend { source, attempts })?;
        let text = strip_quotes(&done.value).to_string();
        if text.is_empty() {
            return Err(LlmError::EmptyOutput {
                template_id: template.template_id.clone(),
            });
        }
        Ok(Generated {
            exchange: ChatExchange {
                request: ExchangeRequest {
                    template_id: template.template_id.clone(),
                    version: template.version.clone(),
                    rendered_messages: messages,
                },
                response: ExchangeResponse {
                    text: text.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: done.attempts,
                },
            },
            text,
        })
    }

    pub fn rewrite_demand(&self, utterances: &str, template: &PromptTemplate) -> Result<Generated, LlmError> {
        Self::expect_task(template, Task::Rewrite)?;
        if utterances.trim().is_empty() {
            return Err(LlmError::EmptyInput("utterances"));
        }
        self.call(
            template,
            BTreeMap::from([("utterances", utterances.trim().to_string())]),
            &[],
        )
    }

    pub fn refine_response(
        &self,
        response: &str,
        demand: &str,
        template: &PromptTemplate,
    ) -> Result<Generated, LlmError> {
        Self::expect_task(template, Task::Refine)?;
        if response.trim().is_empty() {
            return Err(LlmError::EmptyInput("response"));
        }
        if demand.trim().is_empty() {
            return Err(LlmError::EmptyInput("demand"));
        }
        self.call(
            template,
            BTreeMap::from([
                ("response", response.trim().to_string()),
                ("demand", demand.trim().to_string()),
            ]),
            &[],
        )
    }

    pub fn synthesize_answer(
        &self,
        candidates: &[String],
        demand: &str,
        template: &PromptTemplate,
        max_candidates: usize,
    ) -> Result<Generated, LlmError> {
        Self::expect_task(template, Task::Synthesize)?;
        if candidates.is_empty() || candidates.len() > max_candidates {
            return Err(LlmError::CandidateCount {
                count: candidates.len(),
                max: max_candidates,
            });
        }
        let listing = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.trim()))
            .collect::<Vec<_>>()
            .join("\n");
        self.call(
            template,
            BTreeMap::from([("candidates", listing), ("demand", demand.trim().to_string())]),
            candidates,
        )
    }

    /// Never fails: a backend error or an unparseable reply falls back to
    /// the token heuristic.
    pub fn check_demand_validity(&self, demand: &str, template: &PromptTemplate) -> ValidityVerdict {
        let heuristic = || match mock::rule_validity(demand) {
            Ok(()) => ValidityVerdict {
                validity: DemandValidity::Valid,
                reason: None,
            },
            Err(reason) => ValidityVerdict {
                validity: DemandValidity::Invalid,
                reason: Some(reason.to_string()),
            },
        };
        if template.task != Task::Validity || demand.trim().is_empty() {
            return heuristic();
        }
        match self.call(template, BTreeMap::from([("demand", demand.trim().to_string())]), &[]) {
            Ok(g) => parse_validity(&g.text).unwrap_or_else(heuristic),
            Err(e) => {
                log::warn!("validity check fell back to heuristic: {e}");
                heuristic()
            }
        }
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::EmptyInput("text"));
        }
        let result = {
            let _permit = self.limiter.acquire();
            with_retry(&self.retry, |_| self.embedder.embed(text))
        };
        let values = result
            .map_err(|(source, attempts)| LlmError::Backend { source, attempts })?
            .value;
        if values.len() != self.dim {
            return Err(LlmError::Dimension {
                expected: self.dim,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LlmError::NonFinite { index });
        }
        Ok(EmbeddingVector {
            values,
            model_tag: self.embedder.model_tag(),
        })
    }
}

fn parse_validity(reply: &str) -> Option<ValidityVerdict> {
    let lower = reply.trim().to_lowercase();
    if let Some(rest) = lower.strip_prefix("invalid") {
        let reason = rest.trim_start_matches([':', '-', ' ']).trim();
        return Some(ValidityVerdict {
            validity: DemandValidity::Invalid,
            reason: (!reason.is_empty()).then(|| reason.to_string()),
        });
    }
    lower.starts_with("valid").then_some(ValidityVerdict {
        validity: DemandValidity::Valid,
        reason: None,
    })
}

/// Chat over HTTP: POST `{model, messages, temperature: 0}`, reply `{text}`.
#[derive(Debug, Clone)]
pub struct HttpChat {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct ChatReply {
    text: String,
}

impl ChatBackend for HttpChat {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": 0,
        });
        let bytes = crate::http::post_json(&self.endpoint, &body, self.timeout)?;
        let reply: ChatReply =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(format!("chat reply: {e}")))?;
        Ok(reply.text)
    }

    fn name(&self) -> &str {
        "http"
    }
}

/// Embeddings over HTTP: POST `{model, input}`, reply `{values}`.
#[derive(Debug, Clone)]
pub struct HttpEmbed {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbedReply {
    values: Vec<f32>,
}

impl EmbedBackend for HttpEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let body = serde_json::json!({ "model": self.model, "input": text });
        let bytes = crate::http::post_json(&self.endpoint, &body, self.timeout)?;
        let reply: EmbedReply =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(format!("embedding reply: {e}")))?;
        Ok(reply.values)
    }

    fn model_tag(&self) -> String {
        self.model.clone()
    }
}
