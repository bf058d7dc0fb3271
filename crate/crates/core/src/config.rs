//! Run configuration: one cell of the generation x evaluation x selection
//! matrix plus loop hyperparameters, loadable from a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{SplitSizes, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStrategy {
    PromptOnlyRewrite,
    PromptOnlyImprove,
    OneStep,
    GradientLike,
}

impl GenerationStrategy {
    /// Prompt-only strategies never consume training data or evaluations.
    pub fn is_prompt_only(self) -> bool {
        matches!(
            self,
            GenerationStrategy::PromptOnlyRewrite | GenerationStrategy::PromptOnlyImprove
        )
    }

    /// LLM calls one update takes: three for the staged feedback chain,
    /// one otherwise.
    pub fn update_phase_calls(self) -> u64 {
        match self {
            GenerationStrategy::GradientLike => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// Template embedding the (true or corrupted) label; no LLM call.
    Direct,
    /// Template with question and output only.
    None,
    /// LLM critic giving a correct/incorrect verdict.
    CriticBinary,
    /// LLM critic scoring 0-100.
    CriticSmooth,
}

impl EvaluationMode {
    pub fn is_critic(self) -> bool {
        matches!(self, EvaluationMode::CriticBinary | EvaluationMode::CriticSmooth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelCorrectness {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Selection {
    /// Always adopt the newly generated prompt.
    Naive,
    /// Generate n candidates, score them on the validation split, adopt the
    /// best only on strict improvement.
    Validated { n_variants: u32 },
}

impl Selection {
    pub fn n_variants(self) -> u32 {
        match self {
            Selection::Naive => 1,
            Selection::Validated { n_variants } => n_variants,
        }
    }

    pub fn is_validated(self) -> bool {
        matches!(self, Selection::Validated { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            top_p: 0.95,
            max_tokens: 5000,
        }
    }
}

/// Where the dataset lives and how to slice it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub task_kind: TaskKind,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl DatasetRef {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

fn default_false() -> bool {
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generation: GenerationStrategy,
    pub evaluation: EvaluationMode,
    pub training_labels: LabelCorrectness,
    pub validation_labels: LabelCorrectness,
    pub selection: Selection,
    pub batch_size: u32,
    pub iterations: u32,
    pub seed: u64,
    /// Optional seed-controlled reshuffle of the training order each epoch.
    /// Off by default: sequential slices keep runs directly comparable.
    #[serde(default = "default_false")]
    pub shuffle_batches: bool,
    pub sampling: Sampling,
    pub dataset: DatasetRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Check the cross-field invariants. An empty list means the config is valid;
/// violations are data, not failures.
pub fn validate_config(config: &RunConfig) -> Vec<ConfigViolation> {
    let mut violations = Vec::new();
    let mut push = |field: &str, message: String| {
        violations.push(ConfigViolation {
            field: field.to_string(),
            message,
        });
    };

    if config.batch_size == 0 {
        push("batch_size", "must be positive".into());
    }
    if config.iterations == 0 {
        push("iterations", "must be positive".into());
    }
    if let Selection::Validated { n_variants } = config.selection {
        if n_variants == 0 {
            push("selection.n_variants", "must be positive".into());
        }
        if config.dataset.validation == 0 {
            push(
                "dataset.validation",
                "validated selection needs a nonempty validation split".into(),
            );
        }
    }
    if config.sampling.temperature < 0.0 {
        push("sampling.temperature", "must be nonnegative".into());
    }
    if !(config.sampling.top_p > 0.0 && config.sampling.top_p <= 1.0) {
        push("sampling.top_p", "must lie in (0, 1]".into());
    }
    if config.sampling.max_tokens == 0 {
        push("sampling.max_tokens", "must be positive".into());
    }
    if !config.generation.is_prompt_only() && config.dataset.train == 0 {
        push(
            "dataset.train",
            "feedback-driven generation needs a nonempty training split".into(),
        );
    }
    violations
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    /// Parse a TOML config document. Unknown keys are an error.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Parse and validate in one step.
    pub fn load_valid(path: &Path) -> Result<Self, ConfigError> {
        let config = Self::from_toml_file(path)?;
        let violations = validate_config(&config);
        if violations.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(
                violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_config() -> RunConfig {
        RunConfig {
            generation: GenerationStrategy::GradientLike,
            evaluation: EvaluationMode::Direct,
            training_labels: LabelCorrectness::Correct,
            validation_labels: LabelCorrectness::Correct,
            selection: Selection::Naive,
            batch_size: 3,
            iterations: 10,
            seed: 42,
            shuffle_batches: false,
            sampling: Sampling::default(),
            dataset: DatasetRef {
                path: PathBuf::from("data/example.jsonl"),
                task_kind: TaskKind::WebOfLies,
                train: 30,
                validation: 50,
                test: 120,
            },
        }
    }

    #[test]
    fn reference_config_is_valid() {
        assert!(validate_config(&sample_config()).is_empty());
    }

    #[test]
    fn zero_batch_size_is_flagged() {
        let mut c = sample_config();
        c.batch_size = 0;
        let v = validate_config(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "batch_size");
    }

    #[test]
    fn zero_variants_is_flagged() {
        let mut c = sample_config();
        c.selection = Selection::Validated { n_variants: 0 };
        let v = validate_config(&c);
        assert!(v.iter().any(|v| v.field == "selection.n_variants"));
    }

    #[test]
    fn toml_round_trip() {
        let c = sample_config();
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = sample_config().to_toml_string();
        text.push_str("\nmystery_knob = 3\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn shuffle_flag_defaults_off() {
        let text = sample_config()
            .to_toml_string()
            .lines()
            .filter(|l| !l.starts_with("shuffle_batches"))
            .collect::<Vec<_>>()
            .join("\n");
        let c = RunConfig::from_toml_str(&text).unwrap();
        assert!(!c.shuffle_batches);
    }
}
