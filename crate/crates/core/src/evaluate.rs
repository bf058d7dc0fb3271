//! Textual loss construction: direct template evaluation, critic evaluation,
//! and the critic's meta-evaluation.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatRequest, LlmClient, RequestTag};
use crate::config::Sampling;
use crate::prompt::{PromptRole, PromptState};
use crate::task::{extract_answer, grade, make_incorrect_label, payload_matches, render_answer, TaskExample};
use crate::template::{TemplateId, TemplateSet};

pub const VERDICT_OPEN: &str = "<verdict>";
pub const VERDICT_CLOSE: &str = "</verdict>";
pub const SCORE_OPEN: &str = "<score>";
pub const SCORE_CLOSE: &str = "</score>";

/// Which label, if any, an evaluation embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelUsed {
    TrueLabel,
    CorruptedLabel,
    NoLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalKind {
    Direct,
    /// The label-free template of the no-evaluation configuration.
    None,
    Critic { score: Option<f64> },
}

/// The textual loss attached to one generator output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub example_id: String,
    pub generator_output: String,
    pub evaluation_text: String,
    pub kind: EvalKind,
    pub label_used: LabelUsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    Binary,
    Smooth,
}

/// Fill the direct-evaluation template. No LLM call is made.
///
/// `TrueLabel` embeds the recorded answer, `CorruptedLabel` embeds the seeded
/// incorrect label, and `NoLabel` omits any ground truth (the no-evaluation
/// configuration).
pub fn direct_evaluate(
    templates: &TemplateSet,
    example: &TaskExample,
    generator_output: &str,
    label: LabelUsed,
) -> EvaluationRecord {
    let (text, kind) = match label {
        LabelUsed::NoLabel => (
            templates.render(
                TemplateId::DirectEvalNoLabel,
                &[("question", &example.question), ("output", generator_output)],
            ),
            EvalKind::None,
        ),
        LabelUsed::TrueLabel => (
            templates.render(
                TemplateId::DirectEval,
                &[
                    ("question", &example.question),
                    ("output", generator_output),
                    ("answer", &render_answer(&example.answer)),
                ],
            ),
            EvalKind::Direct,
        ),
        LabelUsed::CorruptedLabel => {
            let corrupted = make_incorrect_label(example);
            (
                templates.render(
                    TemplateId::DirectEval,
                    &[
                        ("question", &example.question),
                        ("output", generator_output),
                        ("answer", &render_answer(&corrupted.label)),
                    ],
                ),
                EvalKind::Direct,
            )
        }
    };
    EvaluationRecord {
        example_id: example.id.clone(),
        generator_output: generator_output.to_string(),
        evaluation_text: text,
        kind,
        label_used: label,
    }
}

fn last_tagged_block<'t>(text: &'t str, open: &str, close: &str) -> Option<&'t str> {
    let mut best = None;
    let mut from = 0;
    while let Some(pos) = text[from..].find(open) {
        let start = from + pos + open.len();
        let Some(end) = text[start..].find(close) else { break };
        best = Some(&text[start..start + end]);
        from = start + end + close.len();
    }
    best
}

/// Parse the critic's verdict into a score: {0,1} for binary, [0,100] for
/// smooth. Unparseable verdicts yield `None`.
pub fn parse_critic_score(text: &str, kind: CriticKind) -> Option<f64> {
    match kind {
        CriticKind::Binary => {
            let verdict = last_tagged_block(text, VERDICT_OPEN, VERDICT_CLOSE)?;
            match verdict.trim().to_ascii_lowercase().as_str() {
                "correct" => Some(1.0),
                "incorrect" => Some(0.0),
                _ => None,
            }
        }
        CriticKind::Smooth => {
            let raw = last_tagged_block(text, SCORE_OPEN, SCORE_CLOSE)?;
            let score: f64 = raw.trim().parse().ok()?;
            (0.0..=100.0).contains(&score).then_some(score)
        }
    }
}

/// One LLM call: the critic prompt judges the generator output. The true
/// label never enters this request. An unparseable verdict is kept as a
/// no-score record (treated as 0 downstream) rather than failing the batch.
pub fn critic_evaluate(
    client: &LlmClient,
    templates: &TemplateSet,
    critic_prompt: &PromptState,
    example: &TaskExample,
    generator_output: &str,
    kind: CriticKind,
    sampling: &Sampling,
) -> Result<EvaluationRecord, BackendError> {
    assert_eq!(critic_prompt.role, PromptRole::Critic, "critic prompt required");
    let user_message = templates.render(
        TemplateId::CriticInput,
        &[("question", &example.question), ("output", generator_output)],
    );
    let response = client.complete(&ChatRequest {
        system_prompt: critic_prompt.rendered(),
        user_message,
        temperature: sampling.temperature,
        top_p: sampling.top_p,
        max_tokens: sampling.max_tokens,
        tag: RequestTag::Critic,
    })?;
    let score = parse_critic_score(&response.text, kind);
    if score.is_none() {
        log::warn!(
            "critic verdict unparseable for example {}; treating as score 0",
            example.id
        );
    }
    Ok(EvaluationRecord {
        example_id: example.id.clone(),
        generator_output: generator_output.to_string(),
        evaluation_text: response.text,
        kind: EvalKind::Critic { score },
        label_used: LabelUsed::NoLabel,
    })
}

/// The critic's own textual loss: its evaluation compared against a direct
/// evaluation of the same output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvaluation {
    pub example_id: String,
    pub critic_text: String,
    pub direct_text: String,
    /// Did the critic's verdict match the reference grade?
    pub agreement: bool,
    pub meta_text: String,
}

/// Build the meta-evaluation for a critic verdict.
///
/// The reference grade comes from grading the generator output against the
/// true label (or the corrupted label on incorrect-training runs). A binary
/// critic agrees when its verdict equals the reference; a smooth critic
/// agrees when its score lands on the reference's side of 50.
pub fn meta_evaluate(
    templates: &TemplateSet,
    critic_eval: &EvaluationRecord,
    critic_kind: CriticKind,
    example: &TaskExample,
    generator_output: &str,
    label: LabelUsed,
) -> MetaEvaluation {
    let reference_grade = match label {
        LabelUsed::TrueLabel => grade(
            example,
            extract_answer(generator_output, example.task_kind).as_ref(),
        ),
        LabelUsed::CorruptedLabel => {
            let corrupted = make_incorrect_label(example);
            match extract_answer(generator_output, example.task_kind) {
                Some(got) => payload_matches(&corrupted.label, &got),
                None => false,
            }
        }
        LabelUsed::NoLabel => panic!("meta-evaluation needs a label mode"),
    };
    let score = match critic_eval.kind {
        EvalKind::Critic { score } => score.unwrap_or(0.0),
        _ => panic!("meta-evaluation applies to critic records"),
    };
    let judged_correct = match critic_kind {
        CriticKind::Binary => score == 1.0,
        CriticKind::Smooth => score >= 50.0,
    };
    let agreement = judged_correct == reference_grade;

    let direct = direct_evaluate(templates, example, generator_output, label);
    let meta_text = templates.render(
        TemplateId::MetaEval,
        &[
            ("critic_evaluation", critic_eval.evaluation_text.as_str()),
            ("evaluation", direct.evaluation_text.as_str()),
            ("agreement", if agreement { "consistent" } else { "inconsistent" }),
        ],
    );
    MetaEvaluation {
        example_id: example.id.clone(),
        critic_text: critic_eval.evaluation_text.clone(),
        direct_text: direct.evaluation_text,
        agreement,
        meta_text,
    }
}

/// Concatenate per-example evaluation texts with numbered headers, in
/// example order, for the update-phase templates.
pub fn concat_evaluations(texts: &[String]) -> String {
    let mut out = String::new();
    for (i, text) in texts.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("Example {}:\n{}", i + 1, text));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::task::{AnswerPayload, PersonJudgment, TaskKind, TruthValue};
    use std::sync::Arc;

    fn wol_example(values: [TruthValue; 3]) -> TaskExample {
        TaskExample {
            id: "wol-9".into(),
            question: "Three people make claims about each other.".into(),
            answer: AnswerPayload::WebOfLies {
                persons: ["Ana", "Bo", "Cy"]
                    .iter()
                    .zip(values)
                    .map(|(n, value)| PersonJudgment { name: n.to_string(), value })
                    .collect(),
            },
            task_kind: TaskKind::WebOfLies,
        }
    }

    fn int_example(value: i64) -> TaskExample {
        TaskExample {
            id: "ar-9".into(),
            question: "Apply the custom operators.".into(),
            answer: AnswerPayload::Integer { value },
            task_kind: TaskKind::MultistepArithmetic,
        }
    }

    fn scripted_client(responses: &[&str]) -> LlmClient {
        LlmClient::new(Arc::new(ScriptedBackend::new(responses.to_vec())))
    }

    fn critic_state(kind: CriticKind) -> PromptState {
        let mode = match kind {
            CriticKind::Binary => crate::config::EvaluationMode::CriticBinary,
            CriticKind::Smooth => crate::config::EvaluationMode::CriticSmooth,
        };
        crate::assets::initial_critic_prompt(mode)
    }

    #[test]
    fn direct_evaluation_embeds_both_triples() {
        use TruthValue::*;
        let templates = TemplateSet::builtin();
        let ex = wol_example([Yes, Yes, Yes]);
        let output = "<answer>yes, yes, unknown</answer>";
        let record = direct_evaluate(&templates, &ex, output, LabelUsed::TrueLabel);
        assert!(record.evaluation_text.contains("yes, yes, yes"));
        assert!(record.evaluation_text.contains("yes, yes, unknown"));
        assert_eq!(record.kind, EvalKind::Direct);
    }

    #[test]
    fn no_label_mode_omits_the_answer() {
        let templates = TemplateSet::builtin();
        let ex = int_example(7);
        let record = direct_evaluate(&templates, &ex, "<answer>3</answer>", LabelUsed::NoLabel);
        assert!(record.evaluation_text.contains("Apply the custom operators."));
        assert!(record.evaluation_text.contains("<answer>3</answer>"));
        assert!(!record.evaluation_text.contains("Correct answer"));
        assert_eq!(record.kind, EvalKind::None);
    }

    #[test]
    fn corrupted_mode_embeds_the_corrupted_label() {
        let templates = TemplateSet::builtin();
        let ex = int_example(7);
        let corrupted = make_incorrect_label(&ex);
        let record = direct_evaluate(&templates, &ex, "out", LabelUsed::CorruptedLabel);
        let rendered = render_answer(&corrupted.label);
        assert!(record.evaluation_text.contains(&format!("Correct answer: {rendered}")));
        assert_ne!(rendered, "7");
    }

    #[test]
    fn critic_verdicts_parse_to_scores() {
        assert_eq!(
            parse_critic_score("…<verdict>incorrect</verdict>", CriticKind::Binary),
            Some(0.0)
        );
        assert_eq!(
            parse_critic_score("<verdict> Correct </verdict>", CriticKind::Binary),
            Some(1.0)
        );
        assert_eq!(parse_critic_score("<score>85</score>", CriticKind::Smooth), Some(85.0));
        assert_eq!(parse_critic_score("<score>300</score>", CriticKind::Smooth), None);
        assert_eq!(parse_critic_score("no tags at all", CriticKind::Binary), None);
        // the last well-formed block wins
        assert_eq!(
            parse_critic_score(
                "<verdict>correct</verdict> … on reflection <verdict>incorrect</verdict>",
                CriticKind::Binary
            ),
            Some(0.0)
        );
    }

    #[test]
    fn critic_evaluate_makes_exactly_one_call() {
        let templates = TemplateSet::builtin();
        let client = scripted_client(&["checking…\n<verdict>incorrect</verdict>"]);
        let ex = int_example(7);
        let record = critic_evaluate(
            &client,
            &templates,
            &critic_state(CriticKind::Binary),
            &ex,
            "<answer>9</answer>",
            CriticKind::Binary,
            &Sampling::default(),
        )
        .unwrap();
        assert_eq!(record.kind, EvalKind::Critic { score: Some(0.0) });
        assert!(record.evaluation_text.contains("<verdict>incorrect</verdict>"));
        // the one scripted response is consumed and no more calls were made
        assert_eq!(client.ledger().tag_usage(RequestTag::Critic).output > 0, true);
    }

    #[test]
    fn wrong_critic_text_is_still_a_valid_record() {
        // the critic asserting a wrong judgment is usable by design
        let templates = TemplateSet::builtin();
        let client = scripted_client(&["this is wrong\n<verdict>incorrect</verdict>"]);
        let ex = int_example(7);
        let record = critic_evaluate(
            &client,
            &templates,
            &critic_state(CriticKind::Binary),
            &ex,
            "<answer>7</answer>", // actually correct
            CriticKind::Binary,
            &Sampling::default(),
        )
        .unwrap();
        assert_eq!(record.kind, EvalKind::Critic { score: Some(0.0) });
    }

    #[test]
    fn meta_agreement_follows_the_reference_grade() {
        let templates = TemplateSet::builtin();
        let ex = int_example(7);
        let critic_record = |score| EvaluationRecord {
            example_id: ex.id.clone(),
            generator_output: "<answer>9</answer>".into(),
            evaluation_text: "critic says things".into(),
            kind: EvalKind::Critic { score },
            label_used: LabelUsed::NoLabel,
        };

        // output 9 is wrong; binary critic score 0 judges it wrong: agreement
        let meta = meta_evaluate(
            &templates,
            &critic_record(Some(0.0)),
            CriticKind::Binary,
            &ex,
            "<answer>9</answer>",
            LabelUsed::TrueLabel,
        );
        assert!(meta.agreement);

        // smooth score 85 judges it right: disagreement
        let meta = meta_evaluate(
            &templates,
            &critic_record(Some(85.0)),
            CriticKind::Smooth,
            &ex,
            "<answer>9</answer>",
            LabelUsed::TrueLabel,
        );
        assert!(!meta.agreement);

        // a smooth score of 1 means bad, not a binary "correct"
        let meta = meta_evaluate(
            &templates,
            &critic_record(Some(1.0)),
            CriticKind::Smooth,
            &ex,
            "<answer>9</answer>",
            LabelUsed::TrueLabel,
        );
        assert!(meta.agreement);

        // unparseable verdict acts as score 0
        let meta = meta_evaluate(
            &templates,
            &critic_record(None),
            CriticKind::Binary,
            &ex,
            "<answer>9</answer>",
            LabelUsed::TrueLabel,
        );
        assert!(meta.agreement);
    }

    #[test]
    fn corrupted_reference_grades_against_the_corrupted_label() {
        let templates = TemplateSet::builtin();
        let ex = int_example(7);
        let corrupted = match make_incorrect_label(&ex).label {
            AnswerPayload::Integer { value } => value,
            _ => unreachable!(),
        };
        let output = format!("<answer>{corrupted}</answer>");
        let critic_record = EvaluationRecord {
            example_id: ex.id.clone(),
            generator_output: output.clone(),
            evaluation_text: "critic".into(),
            kind: EvalKind::Critic { score: Some(1.0) },
            label_used: LabelUsed::NoLabel,
        };
        // the output matches the corrupted label, so under corrupted
        // reference grading a "correct" verdict agrees
        let meta = meta_evaluate(
            &templates,
            &critic_record,
            CriticKind::Binary,
            &ex,
            &output,
            LabelUsed::CorruptedLabel,
        );
        assert!(meta.agreement);
        // and under true-label grading it disagrees
        let meta = meta_evaluate(
            &templates,
            &critic_record,
            CriticKind::Binary,
            &ex,
            &output,
            LabelUsed::TrueLabel,
        );
        assert!(!meta.agreement);
        // the meta text embeds both evaluations
        assert!(meta.meta_text.contains("critic"));
        assert!(meta.meta_text.contains("Correct answer:"));
    }

    #[test]
    fn evaluations_concatenate_with_numbered_headers() {
        let block = concat_evaluations(&["first".to_string(), "second".to_string()]);
        assert!(block.starts_with("Example 1:\nfirst"));
        assert!(block.contains("Example 2:\nsecond"));
    }
}
