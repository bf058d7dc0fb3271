//! Prompt templates with literal placeholder substitution.
//!
//! One text asset per template. Placeholders look like `{question}`; each
//! template declares which names it may use, and a template mentioning any
//! other name fails at load time, not at render time. Substituted values are
//! inserted verbatim and never rescanned.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateId {
    DirectEval,
    DirectEvalNoLabel,
    CriticInput,
    MetaEval,
    PromptOnlyRewrite,
    PromptOnlyImprove,
    WithEvalOutputFeedback,
    WithEvalPromptFeedback,
    WithEvalUpdate,
    WithEvalOneStep,
    NoEvalOutputFeedback,
    NoEvalPromptFeedback,
    NoEvalUpdate,
    NoEvalOneStep,
    CriticMetaOutputFeedback,
    CriticMetaPromptFeedback,
    CriticMetaUpdate,
}

impl TemplateId {
    pub const ALL: [TemplateId; 17] = [
        TemplateId::DirectEval,
        TemplateId::DirectEvalNoLabel,
        TemplateId::CriticInput,
        TemplateId::MetaEval,
        TemplateId::PromptOnlyRewrite,
        TemplateId::PromptOnlyImprove,
        TemplateId::WithEvalOutputFeedback,
        TemplateId::WithEvalPromptFeedback,
        TemplateId::WithEvalUpdate,
        TemplateId::WithEvalOneStep,
        TemplateId::NoEvalOutputFeedback,
        TemplateId::NoEvalPromptFeedback,
        TemplateId::NoEvalUpdate,
        TemplateId::NoEvalOneStep,
        TemplateId::CriticMetaOutputFeedback,
        TemplateId::CriticMetaPromptFeedback,
        TemplateId::CriticMetaUpdate,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::DirectEval => "direct_eval.md",
            TemplateId::DirectEvalNoLabel => "direct_eval_no_label.md",
            TemplateId::CriticInput => "critic_input.md",
            TemplateId::MetaEval => "meta_eval.md",
            TemplateId::PromptOnlyRewrite => "prompt_only_rewrite.md",
            TemplateId::PromptOnlyImprove => "prompt_only_improve.md",
            TemplateId::WithEvalOutputFeedback => "with_eval_output_feedback.md",
            TemplateId::WithEvalPromptFeedback => "with_eval_prompt_feedback.md",
            TemplateId::WithEvalUpdate => "with_eval_update.md",
            TemplateId::WithEvalOneStep => "with_eval_one_step.md",
            TemplateId::NoEvalOutputFeedback => "no_eval_output_feedback.md",
            TemplateId::NoEvalPromptFeedback => "no_eval_prompt_feedback.md",
            TemplateId::NoEvalUpdate => "no_eval_update.md",
            TemplateId::NoEvalOneStep => "no_eval_one_step.md",
            TemplateId::CriticMetaOutputFeedback => "critic_meta_output_feedback.md",
            TemplateId::CriticMetaPromptFeedback => "critic_meta_prompt_feedback.md",
            TemplateId::CriticMetaUpdate => "critic_meta_update.md",
        }
    }

    /// Placeholders the template is allowed to mention.
    pub fn allowed_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::DirectEval => &["question", "output", "answer"],
            TemplateId::DirectEvalNoLabel => &["question", "output"],
            TemplateId::CriticInput => &["question", "output"],
            TemplateId::MetaEval => &["critic_evaluation", "evaluation", "agreement"],
            TemplateId::PromptOnlyRewrite | TemplateId::PromptOnlyImprove => &["prompt"],
            TemplateId::WithEvalOutputFeedback
            | TemplateId::NoEvalOutputFeedback
            | TemplateId::CriticMetaOutputFeedback => &["evaluation"],
            TemplateId::WithEvalPromptFeedback
            | TemplateId::NoEvalPromptFeedback
            | TemplateId::CriticMetaPromptFeedback => &["prompt", "output_feedback"],
            TemplateId::WithEvalUpdate
            | TemplateId::NoEvalUpdate
            | TemplateId::CriticMetaUpdate => &["prompt", "prompt_feedback"],
            TemplateId::WithEvalOneStep | TemplateId::NoEvalOneStep => &["prompt", "evaluation"],
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateId::DirectEval => include_str!("../assets/templates/direct_eval.md"),
            TemplateId::DirectEvalNoLabel => {
                include_str!("../assets/templates/direct_eval_no_label.md")
            }
            TemplateId::CriticInput => include_str!("../assets/templates/critic_input.md"),
            TemplateId::MetaEval => include_str!("../assets/templates/meta_eval.md"),
            TemplateId::PromptOnlyRewrite => {
                include_str!("../assets/templates/prompt_only_rewrite.md")
            }
            TemplateId::PromptOnlyImprove => {
                include_str!("../assets/templates/prompt_only_improve.md")
            }
            TemplateId::WithEvalOutputFeedback => {
                include_str!("../assets/templates/with_eval_output_feedback.md")
            }
            TemplateId::WithEvalPromptFeedback => {
                include_str!("../assets/templates/with_eval_prompt_feedback.md")
            }
            TemplateId::WithEvalUpdate => include_str!("../assets/templates/with_eval_update.md"),
            TemplateId::WithEvalOneStep => {
                include_str!("../assets/templates/with_eval_one_step.md")
            }
            TemplateId::NoEvalOutputFeedback => {
                include_str!("../assets/templates/no_eval_output_feedback.md")
            }
            TemplateId::NoEvalPromptFeedback => {
                include_str!("../assets/templates/no_eval_prompt_feedback.md")
            }
            TemplateId::NoEvalUpdate => include_str!("../assets/templates/no_eval_update.md"),
            TemplateId::NoEvalOneStep => include_str!("../assets/templates/no_eval_one_step.md"),
            TemplateId::CriticMetaOutputFeedback => {
                include_str!("../assets/templates/critic_meta_output_feedback.md")
            }
            TemplateId::CriticMetaPromptFeedback => {
                include_str!("../assets/templates/critic_meta_prompt_feedback.md")
            }
            TemplateId::CriticMetaUpdate => {
                include_str!("../assets/templates/critic_meta_update.md")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {file}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { file: &'static str, name: String },
    #[error("template {file}: cannot read: {source}")]
    Io {
        file: &'static str,
        source: std::io::Error,
    },
    #[error("template {file}: missing value for placeholder {{{name}}}")]
    MissingValue { file: &'static str, name: String },
}

/// Scan for `{ident}` placeholders; braces not wrapping a bare identifier are
/// left alone.
fn placeholders(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut end = start;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            if end > start && end < bytes.len() && bytes[end] == b'}' {
                found.push(text[start..end].to_string());
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    found
}

/// The full set of templates, loaded and validated up front.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
}

impl TemplateSet {
    /// The compiled-in template assets.
    pub fn builtin() -> Self {
        let mut texts = BTreeMap::new();
        for id in TemplateId::ALL {
            texts.insert(id, id.builtin_text().to_string());
        }
        let set = Self { texts };
        set.validate().expect("builtin templates are valid");
        set
    }

    /// Load overrides from a directory holding the same file names; files not
    /// present fall back to the builtin text.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut texts = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            let text = if path.exists() {
                std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    file: id.file_name(),
                    source,
                })?
            } else {
                id.builtin_text().to_string()
            };
            texts.insert(id, text);
        }
        let set = Self { texts };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        for (&id, text) in &self.texts {
            for name in placeholders(text) {
                if !id.allowed_placeholders().contains(&name.as_str()) {
                    return Err(TemplateError::UnknownPlaceholder {
                        file: id.file_name(),
                        name,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    /// Substitute every placeholder. Values are inserted literally.
    ///
    /// Panics if a placeholder has no value; the call sites pass the full
    /// allowed set for their template, so this is a programming error.
    pub fn render(&self, id: TemplateId, values: &[(&str, &str)]) -> String {
        let template = self.text(id);
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let after = &rest[pos + 1..];
            let end = after
                .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or(after.len());
            if end > 0 && after[end..].starts_with('}') {
                let name = &after[..end];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .unwrap_or_else(|| {
                        panic!("no value supplied for {{{name}}} in {}", id.file_name())
                    })
                    .1;
                out.push_str(value);
                rest = &after[end + 1..];
            } else {
                out.push('{');
                rest = after;
            }
        }
        out.push_str(rest);
        out
    }
}
