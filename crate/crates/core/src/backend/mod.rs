//! Chat-completion backends: a live HTTP provider, a deterministic scripted
//! mock, and a record/replay archive, all behind one trait, with per-tag
//! token accounting.

mod archive;
mod live;
mod scripted;

pub use archive::{read_archive, request_key, ArchiveEntry, RecordBackend, ReplayBackend};
pub use live::{HttpReply, HttpTransport, LiveBackend, LiveConfig, Provider, ReqwestTransport};
pub use scripted::{CapturingBackend, MockSolverBackend, ScriptedBackend};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Why a request was made; used for accounting, never for semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    /// Task answering, including validation/test scoring passes.
    Generation,
    /// Stage one of the staged update: feedback on the outputs.
    FeedbackOutput,
    /// Stage two: feedback on the prompt.
    FeedbackPrompt,
    /// The call that produces a new prompt body.
    Update,
    /// Critic scoring a generator output.
    Critic,
    /// Every call made by the critic's own optimizer.
    Meta,
}

impl RequestTag {
    pub const ALL: [RequestTag; 6] = [
        RequestTag::Generation,
        RequestTag::FeedbackOutput,
        RequestTag::FeedbackPrompt,
        RequestTag::Update,
        RequestTag::Critic,
        RequestTag::Meta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RequestTag::Generation => "generation",
            RequestTag::FeedbackOutput => "feedback_output",
            RequestTag::FeedbackPrompt => "feedback_prompt",
            RequestTag::Update => "update",
            RequestTag::Critic => "critic",
            RequestTag::Meta => "meta",
        }
    }

    fn index(self) -> usize {
        match self {
            RequestTag::Generation => 0,
            RequestTag::FeedbackOutput => 1,
            RequestTag::FeedbackPrompt => 2,
            RequestTag::Update => 3,
            RequestTag::Critic => 4,
            RequestTag::Meta => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_message: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub tag: RequestTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend_kind: BackendKind,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("provider returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("cannot parse provider response: {0}")]
    InvalidResponse(String),
    #[error("replay archive has no entry for request {key}")]
    ReplayMiss { key: String },
    #[error("scripted backend exhausted its response queue")]
    ScriptExhausted,
    #[error("archive I/O failure: {0}")]
    Archive(#[from] std::io::Error),
    #[error("missing credentials: set {0}")]
    Credentials(&'static str),
}

/// A chat-completion provider. Implementations must be safe to share across
/// concurrently running trials.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Whitespace-delimited word count; the scripted backends use it for
/// provider-independent token accounting.
pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, other: TokenUsage) -> TokenUsage {
        TokenUsage {
            input: self.input + other.input,
            output: self.output + other.output,
        }
    }
}

/// Call and token counts booked under one tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    pub calls: u64,
    pub tokens: TokenUsage,
}

/// Thread-safe per-tag call and token counters. Totals are derived from the
/// per-tag counts, so the total-equals-sum invariant holds by construction.
#[derive(Debug, Default)]
pub struct UsageLedger {
    calls: [AtomicU64; 6],
    input: [AtomicU64; 6],
    output: [AtomicU64; 6],
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tag: RequestTag, response: &ChatResponse) {
        let i = tag.index();
        self.calls[i].fetch_add(1, Ordering::Relaxed);
        self.input[i].fetch_add(response.input_tokens, Ordering::Relaxed);
        self.output[i].fetch_add(response.output_tokens, Ordering::Relaxed);
    }

    pub fn tag_usage(&self, tag: RequestTag) -> TokenUsage {
        let i = tag.index();
        TokenUsage {
            input: self.input[i].load(Ordering::Relaxed),
            output: self.output[i].load(Ordering::Relaxed),
        }
    }

    pub fn tag_calls(&self, tag: RequestTag) -> u64 {
        self.calls[tag.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> TokenUsage {
        RequestTag::ALL
            .iter()
            .fold(TokenUsage::default(), |acc, &t| acc + self.tag_usage(t))
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        let per_tag: BTreeMap<String, TagUsage> = RequestTag::ALL
            .iter()
            .map(|&t| {
                (
                    t.as_str().to_string(),
                    TagUsage { calls: self.tag_calls(t), tokens: self.tag_usage(t) },
                )
            })
            .collect();
        let total = self.total();
        UsageSnapshot { per_tag, total }
    }
}

/// Serializable dump of a ledger at a point in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub per_tag: BTreeMap<String, TagUsage>,
    pub total: TokenUsage,
}

impl UsageSnapshot {
    pub fn tag(&self, tag: RequestTag) -> TagUsage {
        self.per_tag.get(tag.as_str()).copied().unwrap_or_default()
    }
}

/// A backend paired with the ledger that accounts for its calls. Cheap to
/// clone; trials typically share a backend but hold their own ledger.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    ledger: Arc<UsageLedger>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            ledger: Arc::new(UsageLedger::new()),
        }
    }

    pub fn with_ledger(backend: Arc<dyn Backend>, ledger: Arc<UsageLedger>) -> Self {
        Self { backend, ledger }
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.backend.complete(request)?;
        self.ledger.record(request.tag, &response);
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_totals_are_per_tag_sums() {
        let ledger = UsageLedger::new();
        let resp = |i, o| ChatResponse {
            text: String::new(),
            input_tokens: i,
            output_tokens: o,
            backend_kind: BackendKind::Scripted,
        };
        ledger.record(RequestTag::Generation, &resp(10, 5));
        ledger.record(RequestTag::Generation, &resp(7, 2));
        ledger.record(RequestTag::Update, &resp(1, 1));
        assert_eq!(ledger.tag_usage(RequestTag::Generation), TokenUsage { input: 17, output: 7 });
        assert_eq!(ledger.total(), TokenUsage { input: 18, output: 8 });
        let snap = ledger.snapshot();
        let summed = snap
            .per_tag
            .values()
            .fold(TokenUsage::default(), |acc, u| acc + u.tokens);
        assert_eq!(snap.total, summed);
        assert_eq!(snap.tag(RequestTag::Generation).calls, 2);
    }

    #[test]
    fn ledger_accumulates_across_threads() {
        let ledger = Arc::new(UsageLedger::new());
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let ledger = Arc::clone(&ledger);
                scope.spawn(move || {
                    for _ in 0..1000 {
                        ledger.record(
                            RequestTag::Critic,
                            &ChatResponse {
                                text: String::new(),
                                input_tokens: 3,
                                output_tokens: 1,
                                backend_kind: BackendKind::Scripted,
                            },
                        );
                    }
                });
            }
        });
        assert_eq!(ledger.total(), TokenUsage { input: 24_000, output: 8_000 });
    }

    #[test]
    fn word_count_is_whitespace_delimited() {
        assert_eq!(word_count("one two  three\nfour"), 4);
        assert_eq!(word_count(""), 0);
        assert_eq!(word_count("   "), 0);
    }
}
