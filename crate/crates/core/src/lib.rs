//! Engine for textual-feedback prompt optimization experiments.
//!
//! The pieces, bottom to top:
//! - [`task`]: answer payloads, tag extraction, grading, seeded label
//!   corruption, JSONL dataset loading;
//! - [`backend`]: one chat-completion trait over a live HTTP provider, a
//!   deterministic scripted mock, and a record/replay archive, with per-tag
//!   token accounting;
//! - [`template`] and [`evaluate`]: the textual-loss templates (direct,
//!   label-free, critic, and meta variants) and their evaluators;
//! - [`optimize`]: prompt-update strategies (prompt-only rewrite/improve,
//!   one-step, staged feedback chain), naive/validated selection, the
//!   training loop, and generator/critic co-training.
//!
//! Experiment orchestration (plans, resumable trials, reports) lives in the
//! companion harness crate.

pub mod assets;
pub mod backend;
pub mod config;
pub mod evaluate;
pub mod optimize;
pub mod prompt;
pub mod rng;
pub mod task;
pub mod template;

pub use backend::{Backend, BackendError, ChatRequest, ChatResponse, LlmClient, RequestTag};
pub use config::{
    validate_config, EvaluationMode, GenerationStrategy, LabelCorrectness, RunConfig, Selection,
};
pub use evaluate::{EvaluationRecord, LabelUsed};
pub use optimize::{run_trial, TrialOutput, TrialResult, TrialRun};
pub use prompt::{LineageId, PromptRole, PromptState};
pub use task::{AnswerPayload, DatasetSplit, TaskExample, TaskKind};
pub use template::{TemplateId, TemplateSet};
