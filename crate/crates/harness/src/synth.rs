//! Synthetic dataset generation.
//!
//! Questions embed `[[answer:...]]` and `[[wrong:...]]` markers that the
//! scripted mock backend reads, so whole experiment plans run offline with
//! meaningful accuracy dynamics. The values themselves are drawn from the
//! question seed pipeline, so a dataset is fully determined by (task, count,
//! seed).

use std::io::Write;
use std::path::Path;

use apo_core::rng::SplitMix64;
use apo_core::task::{
    make_incorrect_label, render_answer, AnswerPayload, PersonJudgment, TaskExample, TaskKind,
    TruthValue,
};

use crate::HarnessError;

const NAMES: [&str; 12] = [
    "Avery", "Blake", "Carmen", "Dario", "Elif", "Farid", "Greta", "Hana", "Iris", "Jonas",
    "Kira", "Lucio",
];

fn truth_from(v: u64) -> TruthValue {
    match v {
        0 => TruthValue::Yes,
        1 => TruthValue::No,
        _ => TruthValue::Unknown,
    }
}

/// Generate `count` examples for a task kind.
pub fn synth_examples(kind: TaskKind, count: usize, seed: u64) -> Vec<TaskExample> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|i| match kind {
            TaskKind::MultipleChoice => {
                let k = 4;
                let correct = (rng.next_below(k as u64)) as usize;
                let choices: Vec<String> =
                    (0..k).map(|c| format!("option {}", (b'A' + c as u8) as char)).collect();
                let answer = AnswerPayload::MultipleChoice { choices, correct_index: correct };
                // for multiple choice the corrupted label is index+1 mod k,
                // independent of the question text, so the wrong marker can
                // line up with it exactly
                let wrong = (b'A' + ((correct + 1) % k) as u8) as char;
                let question = format!(
                    "Problem mc-{seed:x}-{i}: pick the option this sheet marks as correct. \
                     [[answer:{}]] [[wrong:{wrong}]] \
                     (A) option A (B) option B (C) option C (D) option D",
                    render_answer(&answer),
                );
                TaskExample {
                    id: format!("mc-{i:04}"),
                    question,
                    answer,
                    task_kind: kind,
                }
            }
            TaskKind::WebOfLies => {
                let base = (rng.next_below(NAMES.len() as u64 - 2)) as usize;
                let persons: Vec<PersonJudgment> = (0..3)
                    .map(|p| PersonJudgment {
                        name: NAMES[base + p].to_string(),
                        value: truth_from(rng.next_below(3)),
                    })
                    .collect();
                let answer = AnswerPayload::WebOfLies { persons: persons.clone() };
                let mut flipped = persons.clone();
                flipped[0].value = truth_from((flipped[0].value as u64 + 1) % 3);
                let wrong = flipped
                    .iter()
                    .map(|p| p.value.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                let question = format!(
                    "Puzzle wol-{seed:x}-{i}: {}, {} and {} make statements about one another; \
                     decide who tells the truth. [[answer:{}]] [[wrong:{wrong}]]",
                    persons[0].name,
                    persons[1].name,
                    persons[2].name,
                    render_answer(&answer),
                );
                TaskExample {
                    id: format!("wol-{i:04}"),
                    question,
                    answer,
                    task_kind: kind,
                }
            }
            TaskKind::MultistepArithmetic => {
                let value = rng.next_below(199) as i64 - 99;
                let answer = AnswerPayload::Integer { value };
                // +11 stays outside the corruption delta range, so failing
                // answers never coincide with the corrupted label
                let question = format!(
                    "Compute ar-{seed:x}-{i}: apply the custom operators to the operands. \
                     [[answer:{value}]] [[wrong:{}]]",
                    value + 11
                );
                TaskExample {
                    id: format!("ar-{i:04}"),
                    question,
                    answer,
                    task_kind: kind,
                }
            }
        })
        .collect()
}

fn record_json(example: &TaskExample) -> serde_json::Value {
    match &example.answer {
        AnswerPayload::MultipleChoice { choices, correct_index } => serde_json::json!({
            "id": example.id,
            "question": example.question,
            "choices": choices,
            "answer": correct_index,
        }),
        AnswerPayload::WebOfLies { persons } => {
            let pairs: Vec<[&str; 2]> =
                persons.iter().map(|p| [p.name.as_str(), p.value.as_str()]).collect();
            serde_json::json!({
                "id": example.id,
                "question": example.question,
                "answer": pairs,
            })
        }
        AnswerPayload::Integer { value } => serde_json::json!({
            "id": example.id,
            "question": example.question,
            "answer": value,
        }),
    }
}

/// Write examples in the JSON-Lines dataset format.
pub fn write_jsonl(examples: &[TaskExample], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    for ex in examples {
        writeln!(file, "{}", record_json(ex))?;
    }
    Ok(())
}

/// Corrupted labels for every example, one JSON object per line, with both
/// the true and corrupted payloads rendered.
pub fn corruption_dump(examples: &[TaskExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let corrupted = make_incorrect_label(ex);
        let line = serde_json::json!({
            "id": ex.id,
            "true": render_answer(&ex.answer),
            "corrupted": render_answer(&corrupted.label),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
