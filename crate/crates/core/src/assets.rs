//! Default initial prompts and the constant formatting suffixes per task.

use crate::config::EvaluationMode;
use crate::prompt::{PromptRole, PromptState};
use crate::task::TaskKind;

/// The un-optimized starting prompt for a task: one plain sentence.
pub fn default_prompt_body(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::MultipleChoice => "Answer the given multiple choice question.",
        TaskKind::WebOfLies => "Answer the given logic puzzle question.",
        TaskKind::MultistepArithmetic => "Answer the given arithmetic question.",
    }
}

/// Formatting instructions appended after the learnable body; constant for
/// the whole run.
pub fn format_suffix(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::MultipleChoice => {
            "Write your final answer as a single letter inside <answer></answer> tags."
        }
        TaskKind::WebOfLies => {
            "Write your final answer for the three people in the order they are named, \
             as three comma-separated values from yes, no, or unknown, \
             inside <answer></answer> tags."
        }
        TaskKind::MultistepArithmetic => {
            "Write your final answer as a single integer inside <answer></answer> tags."
        }
    }
}

pub fn initial_generator_prompt(kind: TaskKind) -> PromptState {
    PromptState::initial(
        default_prompt_body(kind),
        format_suffix(kind),
        PromptRole::Generator,
    )
}

pub fn critic_prompt_body() -> &'static str {
    "Evaluate whether the provided answer correctly solves the question."
}

/// The critic's constant suffix states the verdict format for its mode.
pub fn critic_format_suffix(mode: EvaluationMode) -> &'static str {
    match mode {
        EvaluationMode::CriticBinary => {
            "State your verdict as correct or incorrect inside <verdict></verdict> tags."
        }
        EvaluationMode::CriticSmooth => {
            "State a score from 0 to 100 inside <score></score> tags."
        }
        _ => panic!("critic prompts exist only for critic evaluation modes"),
    }
}

pub fn initial_critic_prompt(mode: EvaluationMode) -> PromptState {
    PromptState::initial(critic_prompt_body(), critic_format_suffix(mode), PromptRole::Critic)
}
