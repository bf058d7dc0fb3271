//! Prompt-section ablations: split a prompt body at its numbered headings,
//! then grade include-only and hold-out variants of every section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use apo_core::backend::LlmClient;
use apo_core::config::RunConfig;
use apo_core::optimize::{score_accuracy, GradeAgainst};
use apo_core::prompt::{PromptRole, PromptState};
use apo_core::task::DatasetSplit;
use apo_stats::{mean_ci95, SampleSet};

use crate::plan::BackendSpec;
use crate::HarnessError;

/// A prompt body tuned on this task, with eight numbered sections; ships as
/// the default subject for the ablation demo.
pub const TUNED_PROMPT: &str = include_str!("../assets/wol_tuned_prompt.md");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub index: usize,
    /// The heading line, trimmed.
    pub title: String,
    /// The section's full text, heading included, exactly as it appears.
    pub text: String,
}

/// A prompt split at top-level numbered headings (`1.`, `2.`, ... at line
/// start). Text before the first heading is the preamble and rides along
/// with every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSectionSet {
    pub preamble: String,
    pub sections: Vec<Section>,
    /// False when no headings were found and the whole body became one
    /// section.
    pub headings_found: bool,
}

fn is_heading(line: &str) -> bool {
    let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
    !digits.is_empty() && line[digits.len()..].starts_with('.')
}

/// Split a prompt body into its numbered sections.
///
/// The concatenation of the preamble and every section's text reconstructs
/// the body byte-for-byte.
pub fn split_sections(body: &str) -> PromptSectionSet {
    // split_inclusive keeps line terminators, so reassembly is exact
    let mut preamble = String::new();
    let mut sections: Vec<Section> = Vec::new();
    for line in body.split_inclusive('\n') {
        if is_heading(line) {
            sections.push(Section {
                index: sections.len(),
                title: line.trim().to_string(),
                text: line.to_string(),
            });
        } else if let Some(current) = sections.last_mut() {
            current.text.push_str(line);
        } else {
            preamble.push_str(line);
        }
    }
    // an unterminated final line without newline is handled by
    // split_inclusive already; nothing to patch up
    if sections.is_empty() {
        let section = Section { index: 0, title: String::new(), text: std::mem::take(&mut preamble) };
        return PromptSectionSet {
            preamble,
            sections: vec![section],
            headings_found: false,
        };
    }
    PromptSectionSet { preamble, sections, headings_found: true }
}

impl PromptSectionSet {
    pub fn reconstruct(&self) -> String {
        let mut out = self.preamble.clone();
        for s in &self.sections {
            out.push_str(&s.text);
        }
        out
    }

    /// The preamble plus only section `i`.
    pub fn include_only(&self, i: usize) -> String {
        format!("{}{}", self.preamble, self.sections[i].text)
    }

    /// The preamble plus every section except `i`.
    pub fn hold_out(&self, i: usize) -> String {
        let mut out = self.preamble.clone();
        for (j, s) in self.sections.iter().enumerate() {
            if j != i {
                out.push_str(&s.text);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    IncludeOnly,
    HoldOut,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub section: usize,
    pub title: String,
    pub trials: u32,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub accuracies: Vec<f64>,
}

/// Grade every include-only and hold-out variant of the prompt on the test
/// split, `trials` fresh evaluation passes each (no retraining).
pub fn run_section_ablation(
    prompt: &PromptState,
    dataset: &DatasetSplit,
    config: &RunConfig,
    backend_spec: &BackendSpec,
    output_root: &Path,
    trials: u32,
) -> Result<Vec<AblationRow>, HarnessError> {
    let set = split_sections(&prompt.body);
    if set.sections.len() < 2 {
        return Err(HarnessError::Plan(format!(
            "section ablation needs at least 2 sections, found {}",
            set.sections.len()
        )));
    }
    std::fs::create_dir_all(output_root)?;

    let mut rows = Vec::new();
    for variant in [AblationVariant::IncludeOnly, AblationVariant::HoldOut] {
        for i in 0..set.sections.len() {
            let body = match variant {
                AblationVariant::IncludeOnly => set.include_only(i),
                AblationVariant::HoldOut => set.hold_out(i),
            };
            let state = PromptState::initial(body, prompt.format_suffix.clone(), PromptRole::Generator);
            let label = format!("{variant:?}-{i}");
            let mut accuracies = Vec::with_capacity(trials as usize);
            for t in 0..trials {
                let seed = crate::plan::trial_seed(config.seed, &label, t);
                let relative = Path::new("ablation").join(format!("{label}-r{t}"));
                let dir = output_root.join(&relative);
                let backend = backend_spec.build(seed, &relative, &dir)?;
                let client = LlmClient::new(backend);
                let accuracy = score_accuracy(
                    &client,
                    &state,
                    &dataset.test,
                    GradeAgainst::TrueLabel,
                    &config.sampling,
                )
                .map_err(HarnessError::Backend)?;
                accuracies.push(accuracy);
            }
            let sample = SampleSet::new(label, accuracies.clone())
                .expect("trials >= 1 gives a nonempty sample");
            let (mean, lo, hi) = if accuracies.len() >= 2 {
                mean_ci95(&sample).expect("n >= 2")
            } else {
                (accuracies[0], accuracies[0], accuracies[0])
            };
            rows.push(AblationRow {
                variant,
                section: i,
                title: set.sections[i].title.clone(),
                trials,
                mean,
                lo,
                hi,
                accuracies,
            });
        }
    }
    Ok(rows)
}
