//! Task definitions: answer payloads, tag extraction, grading, seeded label
//! corruption, and dataset loading.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    WebOfLies,
    MultistepArithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthValue {
    Yes,
    No,
    Unknown,
}

impl TruthValue {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "yes" => Some(TruthValue::Yes),
            "no" => Some(TruthValue::No),
            "unknown" => Some(TruthValue::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TruthValue::Yes => "yes",
            TruthValue::No => "no",
            TruthValue::Unknown => "unknown",
        }
    }

    fn from_draw(v: u64) -> Self {
        match v {
            0 => TruthValue::Yes,
            1 => TruthValue::No,
            _ => TruthValue::Unknown,
        }
    }
}

impl fmt::Display for TruthValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named person in a web-of-lies puzzle and their truth-telling status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonJudgment {
    pub name: String,
    pub value: TruthValue,
}

/// Ground-truth (or corrupted) label for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerPayload {
    MultipleChoice {
        choices: Vec<String>,
        correct_index: usize,
    },
    WebOfLies {
        persons: Vec<PersonJudgment>,
    },
    Integer {
        value: i64,
    },
}

impl AnswerPayload {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            AnswerPayload::MultipleChoice { .. } => TaskKind::MultipleChoice,
            AnswerPayload::WebOfLies { .. } => TaskKind::WebOfLies,
            AnswerPayload::Integer { .. } => TaskKind::MultistepArithmetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub question: String,
    pub answer: AnswerPayload,
    pub task_kind: TaskKind,
}

/// What an answer tag parsed to; compared against a payload when grading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractedAnswer {
    ChoiceIndex(usize),
    Triple([TruthValue; 3]),
    Integer(i64),
}

/// Render the canonical tag payload for a label: the choice letter, the
/// comma-separated triple in person order, or the bare integer.
pub fn render_answer(payload: &AnswerPayload) -> String {
    match payload {
        AnswerPayload::MultipleChoice { correct_index, .. } => {
            ((b'A' + *correct_index as u8) as char).to_string()
        }
        AnswerPayload::WebOfLies { persons } => persons
            .iter()
            .map(|p| p.value.as_str())
            .collect::<Vec<_>>()
            .join(", "),
        AnswerPayload::Integer { value } => value.to_string(),
    }
}

/// Parse the last well-formed `<answer>` block in `output_text`.
///
/// Returns `None` when no block parses; grading treats that as incorrect.
pub fn extract_answer(output_text: &str, task_kind: TaskKind) -> Option<ExtractedAnswer> {
    let mut best = None;
    let mut search_from = 0;
    while let Some(open) = output_text[search_from..].find(ANSWER_OPEN) {
        let payload_start = search_from + open + ANSWER_OPEN.len();
        let Some(close) = output_text[payload_start..].find(ANSWER_CLOSE) else {
            break;
        };
        let payload = &output_text[payload_start..payload_start + close];
        if let Some(parsed) = parse_payload(payload, task_kind) {
            best = Some(parsed);
        }
        search_from = payload_start + close + ANSWER_CLOSE.len();
    }
    best
}

fn parse_payload(payload: &str, task_kind: TaskKind) -> Option<ExtractedAnswer> {
    let trimmed = payload.trim();
    match task_kind {
        TaskKind::MultipleChoice => {
            let mut chars = trimmed.chars();
            let c = chars.next()?;
            if chars.next().is_some() || !c.is_ascii_alphabetic() {
                return None;
            }
            Some(ExtractedAnswer::ChoiceIndex(
                (c.to_ascii_uppercase() as u8 - b'A') as usize,
            ))
        }
        TaskKind::WebOfLies => {
            let parts: Vec<&str> = trimmed.split(',').collect();
            if parts.len() != 3 {
                return None;
            }
            let a = TruthValue::parse(parts[0])?;
            let b = TruthValue::parse(parts[1])?;
            let c = TruthValue::parse(parts[2])?;
            Some(ExtractedAnswer::Triple([a, b, c]))
        }
        TaskKind::MultistepArithmetic => {
            let body = trimmed.strip_prefix('+').unwrap_or(trimmed);
            let digits = body.strip_prefix('-').unwrap_or(body);
            if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
                return None;
            }
            body.parse::<i64>().ok().map(ExtractedAnswer::Integer)
        }
    }
}

/// Does the extracted answer match the payload exactly? A web-of-lies triple
/// must match all three persons, `unknown` included.
///
/// Panics if the extracted answer's shape does not match the payload's task
/// kind; callers pair extraction and grading by the same kind.
pub fn payload_matches(expected: &AnswerPayload, got: &ExtractedAnswer) -> bool {
    match (expected, got) {
        (AnswerPayload::MultipleChoice { correct_index, .. }, ExtractedAnswer::ChoiceIndex(i)) => {
            i == correct_index
        }
        (AnswerPayload::WebOfLies { persons }, ExtractedAnswer::Triple(triple)) => persons
            .iter()
            .zip(triple.iter())
            .all(|(p, v)| p.value == *v),
        (AnswerPayload::Integer { value }, ExtractedAnswer::Integer(i)) => i == value,
        (expected, got) => panic!(
            "task-kind mismatch: grading {:?} against {:?}",
            expected.task_kind(),
            got
        ),
    }
}

/// Grade one example: true iff the extracted answer equals the true label.
pub fn grade(example: &TaskExample, extracted: Option<&ExtractedAnswer>) -> bool {
    match extracted {
        None => false,
        Some(got) => payload_matches(&example.answer, got),
    }
}

/// A deliberately wrong label, a pure function of the question text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedLabel {
    pub example_id: String,
    pub label: AnswerPayload,
}

/// Build the corrupted label for an example.
///
/// Multiple choice shifts the correct index by one (wrapping); web of lies
/// redraws the whole triple until it differs from the truth; arithmetic adds
/// a nonzero delta in [-10, 10]. All draws come from SplitMix64 seeded with
/// the FNV-1a hash of the question text, so the same question always corrupts
/// the same way.
pub fn make_incorrect_label(example: &TaskExample) -> CorruptedLabel {
    let label = match &example.answer {
        AnswerPayload::MultipleChoice { choices, correct_index } => AnswerPayload::MultipleChoice {
            choices: choices.clone(),
            correct_index: (correct_index + 1) % choices.len(),
        },
        AnswerPayload::WebOfLies { persons } => {
            let mut rng = SplitMix64::from_text(&example.question);
            let truth: Vec<TruthValue> = persons.iter().map(|p| p.value).collect();
            let corrupted = loop {
                let draw: Vec<TruthValue> = (0..3)
                    .map(|_| TruthValue::from_draw(rng.next_below(3)))
                    .collect();
                if draw != truth {
                    break draw;
                }
            };
            AnswerPayload::WebOfLies {
                persons: persons
                    .iter()
                    .zip(corrupted)
                    .map(|(p, value)| PersonJudgment { name: p.name.clone(), value })
                    .collect(),
            }
        }
        AnswerPayload::Integer { value } => {
            let mut rng = SplitMix64::from_text(&example.question);
            let r = rng.next_below(20) as i64;
            let delta = if r < 10 { r - 10 } else { r - 9 };
            AnswerPayload::Integer { value: value + delta }
        }
    };
    CorruptedLabel {
        example_id: example.id.clone(),
        label,
    }
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset holds {available} examples but the splits need {requested}")]
    Insufficient { available: usize, requested: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    question: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    answer: serde_json::Value,
}

fn parse_record(raw: RawRecord, task_kind: TaskKind, line: usize) -> Result<TaskExample, DatasetError> {
    let fail = |message: String| DatasetError::Parse { line, message };
    let answer = match task_kind {
        TaskKind::MultipleChoice => {
            let choices = raw
                .choices
                .ok_or_else(|| fail("multiple_choice records need a choices array".into()))?;
            if choices.len() < 2 {
                return Err(fail(format!("need at least 2 choices, got {}", choices.len())));
            }
            let idx = raw
                .answer
                .as_u64()
                .ok_or_else(|| fail("answer must be a choice index".into()))? as usize;
            if idx >= choices.len() {
                return Err(fail(format!(
                    "answer index {idx} out of range for {} choices",
                    choices.len()
                )));
            }
            AnswerPayload::MultipleChoice { choices, correct_index: idx }
        }
        TaskKind::WebOfLies => {
            let pairs: Vec<(String, String)> = serde_json::from_value(raw.answer)
                .map_err(|e| fail(format!("answer must be [[name, value]; 3]: {e}")))?;
            if pairs.len() != 3 {
                return Err(fail(format!("need exactly 3 persons, got {}", pairs.len())));
            }
            let persons = pairs
                .into_iter()
                .map(|(name, v)| {
                    TruthValue::parse(&v)
                        .map(|value| PersonJudgment { name, value })
                        .ok_or_else(|| fail(format!("invalid truth value {v:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            AnswerPayload::WebOfLies { persons }
        }
        TaskKind::MultistepArithmetic => {
            let value = raw
                .answer
                .as_i64()
                .ok_or_else(|| fail("answer must be an integer".into()))?;
            AnswerPayload::Integer { value }
        }
    };
    Ok(TaskExample {
        id: raw.id,
        question: raw.question,
        answer,
        task_kind,
    })
}

/// Load a JSON-Lines dataset and slice it into train/validation/test in file
/// order, so splits are stable across runs.
pub fn load_dataset(
    path: &Path,
    task_kind: TaskKind,
    sizes: SplitSizes,
) -> Result<DatasetSplit, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId { line: i + 1, id: raw.id });
        }
        examples.push(parse_record(raw, task_kind, i + 1)?);
    }
    split_examples(examples, sizes)
}

/// Slice pre-parsed examples into splits in order.
pub fn split_examples(
    examples: Vec<TaskExample>,
    sizes: SplitSizes,
) -> Result<DatasetSplit, DatasetError> {
    let requested = sizes.train + sizes.validation + sizes.test;
    if examples.len() < requested {
        return Err(DatasetError::Insufficient {
            available: examples.len(),
            requested,
        });
    }
    let mut it = examples.into_iter();
    let train: Vec<_> = it.by_ref().take(sizes.train).collect();
    let validation: Vec<_> = it.by_ref().take(sizes.validation).collect();
    let test: Vec<_> = it.by_ref().take(sizes.test).collect();
    Ok(DatasetSplit { train, validation, test })
}
