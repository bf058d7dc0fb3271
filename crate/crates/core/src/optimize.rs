//! Prompt-update strategies, candidate selection, and the training loop.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets;
use crate::backend::{
    Backend, BackendError, ChatRequest, LlmClient, RequestTag, TokenUsage, UsageSnapshot,
};
use crate::config::{EvaluationMode, GenerationStrategy, LabelCorrectness, RunConfig, Sampling, Selection};
use crate::evaluate::{
    concat_evaluations, critic_evaluate, direct_evaluate, meta_evaluate, CriticKind, EvalKind,
    EvaluationRecord, LabelUsed,
};
use crate::prompt::{LineageId, PromptRole, PromptState};
use crate::rng::{fnv1a64_fields, SplitMix64};
use crate::task::{
    extract_answer, grade, make_incorrect_label, payload_matches, DatasetSplit, TaskExample,
};
use crate::template::{TemplateId, TemplateSet};

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// The two intermediate texts of a staged update, kept for lineage tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFeedback {
    pub output_feedback: String,
    pub prompt_feedback: String,
    pub source_evaluations: Vec<EvaluationRecord>,
}

/// Candidate prompts for one iteration, with scores once validated.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<PromptState>,
    pub validation_scores: Option<Vec<f64>>,
    pub incumbent_score: Option<f64>,
}

/// One row per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Incumbent after this iteration's selection.
    pub prompt_lineage_id: LineageId,
    pub batch_example_ids: Vec<String>,
    /// The incumbent's validation score (validated mode only).
    pub validation_score: Option<f64>,
    pub adopted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: RunConfig,
    pub per_iteration: Vec<IterationRecord>,
    pub final_prompt: PromptState,
    pub test_accuracy: f64,
    pub token_usage: TokenUsage,
}

/// Full texts behind one candidate: the evaluator outputs, both feedback
/// stages, and the resulting prompt body, in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub iteration: u32,
    pub role: PromptRole,
    pub candidate_index: u32,
    pub parent_id: LineageId,
    pub lineage_id: LineageId,
    pub body: String,
    pub evaluations: Vec<EvaluationRecord>,
    pub output_feedback: Option<String>,
    pub prompt_feedback: Option<String>,
    pub validation_score: Option<f64>,
    pub adopted: bool,
}

/// A completed trial: the summary plus the full lineage and ledger dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRun {
    pub result: TrialResult,
    pub lineage: Vec<LineageRecord>,
    pub usage: UsageSnapshot,
}

/// What a trial produced: critic modes co-train two prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrialOutput {
    Single { run: TrialRun },
    CoTrained { generator: TrialRun, critic: TrialRun },
}

impl TrialOutput {
    /// The generator-side run, whichever mode produced it.
    pub fn primary(&self) -> &TrialRun {
        match self {
            TrialOutput::Single { run } => run,
            TrialOutput::CoTrained { generator, .. } => generator,
        }
    }
}

/// Rows and texts recovered from a trial that aborted mid-run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialTrial {
    pub per_iteration: Vec<IterationRecord>,
    pub lineage: Vec<LineageRecord>,
    pub usage: UsageSnapshot,
}

#[derive(Debug, Error)]
#[error("trial aborted at iteration {iteration}: {source}")]
pub struct TrialError {
    pub iteration: u32,
    #[source]
    pub source: BackendError,
    pub partial: PartialTrial,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("naive selection expects exactly one candidate, got {0}")]
    NaiveCandidateCount(usize),
    #[error("validated selection got {scores} scores for {candidates} candidates")]
    ScoreLengthMismatch { candidates: usize, scores: usize },
    #[error("validated selection needs an incumbent score")]
    MissingIncumbentScore,
}

// ---------------------------------------------------------------------------
// update strategies
// ---------------------------------------------------------------------------

/// Outcome of one update attempt. An empty completion keeps the old state
/// (`changed: false`) instead of failing the iteration.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub state: PromptState,
    pub changed: bool,
    pub feedback: Option<BatchFeedback>,
}

/// Which template wording an update chain uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateFamily {
    /// Evaluations carry grading signal (direct or critic).
    WithEval,
    /// The no-evaluation configuration: question and output only.
    NoEval,
    /// The critic's own optimizer, driven by meta-evaluations.
    CriticMeta,
}

impl TemplateFamily {
    pub fn for_evaluations(evals: &[EvaluationRecord]) -> Self {
        match evals.first().map(|e| e.kind) {
            Some(EvalKind::None) => TemplateFamily::NoEval,
            _ => TemplateFamily::WithEval,
        }
    }

    fn output_feedback(self) -> TemplateId {
        match self {
            TemplateFamily::WithEval => TemplateId::WithEvalOutputFeedback,
            TemplateFamily::NoEval => TemplateId::NoEvalOutputFeedback,
            TemplateFamily::CriticMeta => TemplateId::CriticMetaOutputFeedback,
        }
    }

    fn prompt_feedback(self) -> TemplateId {
        match self {
            TemplateFamily::WithEval => TemplateId::WithEvalPromptFeedback,
            TemplateFamily::NoEval => TemplateId::NoEvalPromptFeedback,
            TemplateFamily::CriticMeta => TemplateId::CriticMetaPromptFeedback,
        }
    }

    fn update(self) -> TemplateId {
        match self {
            TemplateFamily::WithEval => TemplateId::WithEvalUpdate,
            TemplateFamily::NoEval => TemplateId::NoEvalUpdate,
            TemplateFamily::CriticMeta => TemplateId::CriticMetaUpdate,
        }
    }

    fn one_step(self) -> TemplateId {
        match self {
            TemplateFamily::WithEval => TemplateId::WithEvalOneStep,
            TemplateFamily::NoEval => TemplateId::NoEvalOneStep,
            TemplateFamily::CriticMeta => panic!("the critic optimizer is always staged"),
        }
    }

    /// Tags for the three chain stages; the critic's optimizer books all its
    /// calls under `meta`.
    fn stage_tags(self) -> (RequestTag, RequestTag, RequestTag) {
        match self {
            TemplateFamily::CriticMeta => (RequestTag::Meta, RequestTag::Meta, RequestTag::Meta),
            _ => (
                RequestTag::FeedbackOutput,
                RequestTag::FeedbackPrompt,
                RequestTag::Update,
            ),
        }
    }

    fn update_tag(self) -> RequestTag {
        match self {
            TemplateFamily::CriticMeta => RequestTag::Meta,
            _ => RequestTag::Update,
        }
    }
}

fn chat(user_message: String, tag: RequestTag, prompt_context: &Sampling) -> ChatRequest {
    ChatRequest {
        system_prompt: String::new(),
        user_message,
        temperature: prompt_context.temperature,
        top_p: prompt_context.top_p,
        max_tokens: prompt_context.max_tokens,
        tag,
    }
}

/// Rephrase or improve a prompt from the prompt alone. One LLM call.
pub fn prompt_only_update(
    client: &LlmClient,
    templates: &TemplateSet,
    prompt: &PromptState,
    improve: bool,
    sampling: &Sampling,
) -> Result<UpdateResult, BackendError> {
    assert_eq!(prompt.role, PromptRole::Generator);
    let id = if improve {
        TemplateId::PromptOnlyImprove
    } else {
        TemplateId::PromptOnlyRewrite
    };
    let user = templates.render(id, &[("prompt", &prompt.body)]);
    let response = client.complete(&chat(user, RequestTag::Update, sampling))?;
    Ok(adopt_body(prompt, &response.text, None))
}

fn adopt_body(prompt: &PromptState, completion: &str, feedback: Option<BatchFeedback>) -> UpdateResult {
    let body = completion.trim();
    if body.is_empty() {
        log::warn!("empty completion; keeping prompt {}", prompt.lineage_id);
        UpdateResult {
            state: prompt.clone(),
            changed: false,
            feedback,
        }
    } else {
        UpdateResult {
            state: prompt.child(body),
            changed: true,
            feedback,
        }
    }
}

/// Rewrite the prompt directly from the evaluation block. One LLM call.
pub fn one_step_update(
    client: &LlmClient,
    templates: &TemplateSet,
    prompt: &PromptState,
    evaluations: &[EvaluationRecord],
    sampling: &Sampling,
) -> Result<UpdateResult, BackendError> {
    assert!(!evaluations.is_empty(), "one-step update needs evaluations");
    let family = TemplateFamily::for_evaluations(evaluations);
    let block = concat_evaluations(
        &evaluations.iter().map(|e| e.evaluation_text.clone()).collect::<Vec<_>>(),
    );
    let user = templates.render(
        family.one_step(),
        &[("prompt", prompt.body.as_str()), ("evaluation", block.as_str())],
    );
    let response = client.complete(&chat(user, family.update_tag(), sampling))?;
    Ok(adopt_body(prompt, &response.text, None))
}

/// The staged update: feedback on the outputs, feedback on the prompt, then
/// the rewrite — three sequential LLM calls, each consuming the previous
/// stage's text. An empty completion at any stage keeps the incumbent.
pub fn gradient_like_update(
    client: &LlmClient,
    templates: &TemplateSet,
    prompt: &PromptState,
    evaluations: &[EvaluationRecord],
    sampling: &Sampling,
) -> Result<UpdateResult, BackendError> {
    assert!(!evaluations.is_empty(), "staged update needs evaluations");
    let family = TemplateFamily::for_evaluations(evaluations);
    staged_update(client, templates, prompt, evaluations, family, sampling)
}

pub(crate) fn staged_update(
    client: &LlmClient,
    templates: &TemplateSet,
    prompt: &PromptState,
    evaluations: &[EvaluationRecord],
    family: TemplateFamily,
    sampling: &Sampling,
) -> Result<UpdateResult, BackendError> {
    let (tag1, tag2, tag3) = family.stage_tags();
    let block = concat_evaluations(
        &evaluations.iter().map(|e| e.evaluation_text.clone()).collect::<Vec<_>>(),
    );

    let user = templates.render(family.output_feedback(), &[("evaluation", block.as_str())]);
    let output_feedback = client.complete(&chat(user, tag1, sampling))?.text;
    if output_feedback.trim().is_empty() {
        log::warn!("empty output feedback; keeping prompt {}", prompt.lineage_id);
        return Ok(UpdateResult { state: prompt.clone(), changed: false, feedback: None });
    }

    let user = templates.render(
        family.prompt_feedback(),
        &[("prompt", prompt.body.as_str()), ("output_feedback", output_feedback.as_str())],
    );
    let prompt_feedback = client.complete(&chat(user, tag2, sampling))?.text;
    if prompt_feedback.trim().is_empty() {
        log::warn!("empty prompt feedback; keeping prompt {}", prompt.lineage_id);
        return Ok(UpdateResult { state: prompt.clone(), changed: false, feedback: None });
    }

    let user = templates.render(
        family.update(),
        &[("prompt", prompt.body.as_str()), ("prompt_feedback", prompt_feedback.as_str())],
    );
    let response = client.complete(&chat(user, tag3, sampling))?;
    let feedback = BatchFeedback {
        output_feedback,
        prompt_feedback,
        source_evaluations: evaluations.to_vec(),
    };
    Ok(adopt_body(prompt, &response.text, Some(feedback)))
}

// ---------------------------------------------------------------------------
// selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Selected {
    pub state: PromptState,
    pub adopted: bool,
    pub candidate_index: Option<usize>,
}

/// Choose the next incumbent.
///
/// Naive mode adopts its single candidate unconditionally. Validated mode
/// adopts the best-scoring candidate only if it strictly beats the incumbent;
/// candidate ties break toward the lowest index, and a tie with the incumbent
/// keeps the incumbent.
pub fn select(
    incumbent: &PromptState,
    set: &CandidateSet,
    selection: Selection,
) -> Result<Selected, SelectError> {
    match selection {
        Selection::Naive => {
            if set.candidates.len() != 1 {
                return Err(SelectError::NaiveCandidateCount(set.candidates.len()));
            }
            Ok(Selected {
                state: set.candidates[0].clone(),
                adopted: true,
                candidate_index: Some(0),
            })
        }
        Selection::Validated { .. } => {
            let scores = set
                .validation_scores
                .as_ref()
                .ok_or(SelectError::ScoreLengthMismatch {
                    candidates: set.candidates.len(),
                    scores: 0,
                })?;
            if scores.len() != set.candidates.len() {
                return Err(SelectError::ScoreLengthMismatch {
                    candidates: set.candidates.len(),
                    scores: scores.len(),
                });
            }
            let incumbent_score = set.incumbent_score.ok_or(SelectError::MissingIncumbentScore)?;
            let mut best = 0usize;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            if scores[best] > incumbent_score {
                Ok(Selected {
                    state: set.candidates[best].clone(),
                    adopted: true,
                    candidate_index: Some(best),
                })
            } else {
                Ok(Selected {
                    state: incumbent.clone(),
                    adopted: false,
                    candidate_index: None,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// grading passes
// ---------------------------------------------------------------------------

/// Which label a grading pass scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradeAgainst {
    TrueLabel,
    CorruptedLabel,
}

pub fn generation_request(prompt: &PromptState, example: &TaskExample, sampling: &Sampling) -> ChatRequest {
    ChatRequest {
        system_prompt: prompt.rendered(),
        user_message: example.question.clone(),
        temperature: sampling.temperature,
        top_p: sampling.top_p,
        max_tokens: sampling.max_tokens,
        tag: RequestTag::Generation,
    }
}

/// Generate an answer per example and grade it. Returns the accuracy.
pub fn score_accuracy(
    client: &LlmClient,
    prompt: &PromptState,
    examples: &[TaskExample],
    against: GradeAgainst,
    sampling: &Sampling,
) -> Result<f64, BackendError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for example in examples {
        let output = client.complete(&generation_request(prompt, example, sampling))?.text;
        if grade_output(example, &output, against) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Grade one already-generated output.
pub fn grade_output(example: &TaskExample, output: &str, against: GradeAgainst) -> bool {
    let extracted = extract_answer(output, example.task_kind);
    match against {
        GradeAgainst::TrueLabel => grade(example, extracted.as_ref()),
        GradeAgainst::CorruptedLabel => {
            let corrupted = make_incorrect_label(example);
            match extracted {
                Some(got) => payload_matches(&corrupted.label, &got),
                None => false,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batch scheduling
// ---------------------------------------------------------------------------

/// Deterministic batch order: sequential slices of the train split, wrapping
/// across epochs; optionally reshuffled per epoch from the run seed.
pub struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    shuffle: bool,
}

impl BatchSchedule {
    pub fn new(n: usize, seed: u64, shuffle: bool) -> Self {
        let mut schedule = Self {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            seed,
            shuffle,
        };
        if shuffle {
            schedule.reshuffle();
        }
        schedule
    }

    fn reshuffle(&mut self) {
        let mut rng = SplitMix64::new(fnv1a64_fields(&[
            &self.seed.to_le_bytes(),
            &self.epoch.to_le_bytes(),
        ]));
        rng.shuffle(&mut self.order);
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        assert!(!self.order.is_empty(), "schedule over an empty split");
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.epoch += 1;
                if self.shuffle {
                    self.reshuffle();
                }
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

struct Trainer<'a> {
    config: &'a RunConfig,
    dataset: &'a DatasetSplit,
    templates: &'a TemplateSet,
    client: LlmClient,
    rows: Vec<IterationRecord>,
    lineage: Vec<LineageRecord>,
}

impl<'a> Trainer<'a> {
    fn new(
        config: &'a RunConfig,
        dataset: &'a DatasetSplit,
        templates: &'a TemplateSet,
        backend: Arc<dyn Backend>,
    ) -> Self {
        Self {
            config,
            dataset,
            templates,
            client: LlmClient::new(backend),
            rows: Vec::new(),
            lineage: Vec::new(),
        }
    }

    fn abort(&self, iteration: u32, source: BackendError) -> Box<TrialError> {
        Box::new(TrialError {
            iteration,
            source,
            partial: PartialTrial {
                per_iteration: self.rows.clone(),
                lineage: self.lineage.clone(),
                usage: self.client.ledger().snapshot(),
            },
        })
    }

    fn training_label(&self) -> LabelUsed {
        match self.config.training_labels {
            LabelCorrectness::Correct => LabelUsed::TrueLabel,
            LabelCorrectness::Incorrect => LabelUsed::CorruptedLabel,
        }
    }

    fn validation_target(&self) -> GradeAgainst {
        match self.config.validation_labels {
            LabelCorrectness::Correct => GradeAgainst::TrueLabel,
            LabelCorrectness::Incorrect => GradeAgainst::CorruptedLabel,
        }
    }

    fn generate_outputs(&self, prompt: &PromptState, examples: &[&TaskExample]) -> Result<Vec<String>, BackendError> {
        examples
            .iter()
            .map(|ex| {
                self.client
                    .complete(&generation_request(prompt, ex, &self.config.sampling))
                    .map(|r| r.text)
            })
            .collect()
    }

    fn evaluate_batch(
        &self,
        examples: &[&TaskExample],
        outputs: &[String],
    ) -> Vec<EvaluationRecord> {
        let label = match self.config.evaluation {
            EvaluationMode::Direct => self.training_label(),
            EvaluationMode::None => LabelUsed::NoLabel,
            _ => unreachable!("critic evaluation runs through co-training"),
        };
        examples
            .iter()
            .zip(outputs)
            .map(|(ex, out)| direct_evaluate(self.templates, ex, out, label))
            .collect()
    }

    fn make_candidate(
        &self,
        incumbent: &PromptState,
        evaluations: &[EvaluationRecord],
    ) -> Result<UpdateResult, BackendError> {
        let sampling = &self.config.sampling;
        match self.config.generation {
            GenerationStrategy::PromptOnlyRewrite => {
                prompt_only_update(&self.client, self.templates, incumbent, false, sampling)
            }
            GenerationStrategy::PromptOnlyImprove => {
                prompt_only_update(&self.client, self.templates, incumbent, true, sampling)
            }
            GenerationStrategy::OneStep => {
                one_step_update(&self.client, self.templates, incumbent, evaluations, sampling)
            }
            GenerationStrategy::GradientLike => {
                gradient_like_update(&self.client, self.templates, incumbent, evaluations, sampling)
            }
        }
    }

    fn score_validation(&self, prompt: &PromptState) -> Result<f64, BackendError> {
        score_accuracy(
            &self.client,
            prompt,
            &self.dataset.validation,
            self.validation_target(),
            &self.config.sampling,
        )
    }

    /// One iteration of the generic (non-critic) loop. Returns the new
    /// incumbent and its carried validation score.
    #[allow(clippy::too_many_arguments)]
    fn iteration(
        &mut self,
        it: u32,
        schedule: Option<&mut BatchSchedule>,
        incumbent: PromptState,
        incumbent_score: Option<f64>,
    ) -> Result<(PromptState, Option<f64>), BackendError> {
        let prompt_only = self.config.generation.is_prompt_only();

        let (batch, evaluations) = if prompt_only {
            (Vec::new(), Vec::new())
        } else {
            let idx = schedule.expect("feedback-driven runs have a schedule").next_batch(self.config.batch_size as usize);
            let batch: Vec<&TaskExample> = idx.iter().map(|&i| &self.dataset.train[i]).collect();
            let outputs = self.generate_outputs(&incumbent, &batch)?;
            let evaluations = self.evaluate_batch(&batch, &outputs);
            (batch, evaluations)
        };
        let batch_ids: Vec<String> = batch.iter().map(|ex| ex.id.clone()).collect();

        let n_variants = self.config.selection.n_variants();
        let mut updates = Vec::with_capacity(n_variants as usize);
        for _ in 0..n_variants {
            updates.push(self.make_candidate(&incumbent, &evaluations)?);
        }

        let (next, next_score, adopted, scores) = match self.config.selection {
            Selection::Naive => {
                let update = &updates[0];
                if update.changed {
                    (update.state.clone(), None, true, None)
                } else {
                    (incumbent.clone(), None, false, None)
                }
            }
            Selection::Validated { .. } => {
                let incumbent_score = match incumbent_score {
                    Some(s) => s,
                    None => self.score_validation(&incumbent)?,
                };
                let mut scores = Vec::with_capacity(updates.len());
                for u in &updates {
                    scores.push(self.score_validation(&u.state)?);
                }
                let set = CandidateSet {
                    candidates: updates.iter().map(|u| u.state.clone()).collect(),
                    validation_scores: Some(scores.clone()),
                    incumbent_score: Some(incumbent_score),
                };
                let selected = select(&incumbent, &set, self.config.selection)
                    .expect("scores were just computed");
                let next_score = match selected.candidate_index {
                    Some(i) => scores[i],
                    None => incumbent_score,
                };
                (selected.state, Some(next_score), selected.adopted, Some(scores))
            }
        };

        for (v, update) in updates.iter().enumerate() {
            self.lineage.push(LineageRecord {
                iteration: it,
                role: PromptRole::Generator,
                candidate_index: v as u32,
                parent_id: incumbent.lineage_id.clone(),
                lineage_id: update.state.lineage_id.clone(),
                body: update.state.body.clone(),
                evaluations: evaluations.clone(),
                output_feedback: update.feedback.as_ref().map(|f| f.output_feedback.clone()),
                prompt_feedback: update.feedback.as_ref().map(|f| f.prompt_feedback.clone()),
                validation_score: scores.as_ref().map(|s| s[v]),
                adopted: adopted && next.lineage_id == update.state.lineage_id,
            });
        }
        self.rows.push(IterationRecord {
            iteration: it,
            prompt_lineage_id: next.lineage_id.clone(),
            batch_example_ids: batch_ids,
            validation_score: next_score,
            adopted,
        });
        Ok((next, next_score))
    }
}

/// A stepwise training run: one [`step`](TrainingSession::step) per
/// iteration, with the incumbent inspectable between steps (the overfitting
/// experiment grades it after every iteration), then
/// [`finish`](TrainingSession::finish) for the test pass.
pub struct TrainingSession<'a> {
    trainer: Trainer<'a>,
    incumbent: PromptState,
    incumbent_score: Option<f64>,
    schedule: Option<BatchSchedule>,
    next_iteration: u32,
}

impl<'a> TrainingSession<'a> {
    pub fn new(
        config: &'a RunConfig,
        dataset: &'a DatasetSplit,
        backend: Arc<dyn Backend>,
        templates: &'a TemplateSet,
    ) -> Self {
        assert!(
            config.generation.is_prompt_only() || !config.evaluation.is_critic(),
            "critic evaluation trains through run_critic_co_training"
        );
        let schedule = (!config.generation.is_prompt_only())
            .then(|| BatchSchedule::new(dataset.train.len(), config.seed, config.shuffle_batches));
        Self {
            trainer: Trainer::new(config, dataset, templates, backend),
            incumbent: assets::initial_generator_prompt(config.dataset.task_kind),
            incumbent_score: None,
            schedule,
            next_iteration: 0,
        }
    }

    pub fn incumbent(&self) -> &PromptState {
        &self.incumbent
    }

    pub fn client(&self) -> &LlmClient {
        &self.trainer.client
    }

    pub fn iterations_done(&self) -> u32 {
        self.next_iteration
    }

    /// Run one training iteration.
    pub fn step(&mut self) -> Result<(), Box<TrialError>> {
        let it = self.next_iteration;
        match self.trainer.iteration(
            it,
            self.schedule.as_mut(),
            self.incumbent.clone(),
            self.incumbent_score,
        ) {
            Ok((next, score)) => {
                self.incumbent = next;
                self.incumbent_score = score;
                self.next_iteration = it + 1;
                Ok(())
            }
            Err(e) => Err(self.trainer.abort(it, e)),
        }
    }

    /// Grade the final prompt on the test split and assemble the trial.
    pub fn finish(self) -> Result<TrialRun, Box<TrialError>> {
        let config = self.trainer.config;
        let test_accuracy = match score_accuracy(
            &self.trainer.client,
            &self.incumbent,
            &self.trainer.dataset.test,
            GradeAgainst::TrueLabel,
            &config.sampling,
        ) {
            Ok(acc) => acc,
            Err(e) => return Err(self.trainer.abort(self.next_iteration, e)),
        };
        let usage = self.trainer.client.ledger().snapshot();
        Ok(TrialRun {
            result: TrialResult {
                config: config.clone(),
                per_iteration: self.trainer.rows,
                final_prompt: self.incumbent,
                test_accuracy,
                token_usage: usage.total,
            },
            lineage: self.trainer.lineage,
            usage,
        })
    }
}

/// Run one trial of the training loop with direct, none, or no evaluation.
///
/// Critic evaluation is a different shape (two co-trained prompts); use
/// [`run_trial`] to dispatch automatically.
pub fn run_training(
    config: &RunConfig,
    dataset: &DatasetSplit,
    backend: Arc<dyn Backend>,
    templates: &TemplateSet,
) -> Result<TrialRun, Box<TrialError>> {
    let mut session = TrainingSession::new(config, dataset, backend, templates);
    for _ in 0..config.iterations {
        session.step()?;
    }
    session.finish()
}

/// Co-train the generator and critic prompts.
///
/// Per batch, the critic's evaluations feed the generator's update (the true
/// label never enters those requests), while meta-evaluations comparing the
/// critic against a direct evaluation feed an independent staged optimizer
/// for the critic prompt, booked entirely under the `meta` tag.
pub fn run_critic_co_training(
    config: &RunConfig,
    dataset: &DatasetSplit,
    backend: Arc<dyn Backend>,
    templates: &TemplateSet,
) -> Result<(TrialRun, TrialRun), Box<TrialError>> {
    assert!(config.evaluation.is_critic(), "co-training needs a critic evaluation mode");
    assert!(!config.generation.is_prompt_only(), "prompt-only runs have no critic");

    let critic_kind = match config.evaluation {
        EvaluationMode::CriticBinary => CriticKind::Binary,
        EvaluationMode::CriticSmooth => CriticKind::Smooth,
        _ => unreachable!(),
    };
    let mut trainer = Trainer::new(config, dataset, templates, backend);
    let mut incumbent = assets::initial_generator_prompt(config.dataset.task_kind);
    let mut incumbent_score: Option<f64> = None;
    let mut critic = assets::initial_critic_prompt(config.evaluation);
    let mut critic_rows: Vec<IterationRecord> = Vec::new();
    let mut schedule = BatchSchedule::new(dataset.train.len(), config.seed, config.shuffle_batches);
    let training_label = trainer.training_label();

    macro_rules! try_it {
        ($it:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(trainer.abort($it, err)),
            }
        };
    }

    for it in 0..config.iterations {
        let idx = schedule.next_batch(config.batch_size as usize);
        let batch: Vec<&TaskExample> = idx.iter().map(|&i| &dataset.train[i]).collect();
        let outputs = try_it!(it, trainer.generate_outputs(&incumbent, &batch));

        // critic evaluations drive the generator update
        let mut critic_evals = Vec::with_capacity(batch.len());
        for (ex, out) in batch.iter().zip(&outputs) {
            critic_evals.push(try_it!(
                it,
                critic_evaluate(
                    &trainer.client,
                    templates,
                    &critic,
                    ex,
                    out,
                    critic_kind,
                    &config.sampling,
                )
            ));
        }

        // meta-evaluations drive the critic update
        let meta_records: Vec<EvaluationRecord> = batch
            .iter()
            .zip(&outputs)
            .zip(&critic_evals)
            .map(|((ex, out), ce)| {
                let meta = meta_evaluate(templates, ce, critic_kind, ex, out, training_label);
                EvaluationRecord {
                    example_id: meta.example_id.clone(),
                    generator_output: String::new(),
                    evaluation_text: meta.meta_text,
                    kind: EvalKind::Direct,
                    label_used: training_label,
                }
            })
            .collect();

        // generator candidates and selection
        let n_variants = config.selection.n_variants();
        let mut updates = Vec::with_capacity(n_variants as usize);
        for _ in 0..n_variants {
            let update = match config.generation {
                GenerationStrategy::OneStep => one_step_update(
                    &trainer.client,
                    templates,
                    &incumbent,
                    &critic_evals,
                    &config.sampling,
                ),
                GenerationStrategy::GradientLike => gradient_like_update(
                    &trainer.client,
                    templates,
                    &incumbent,
                    &critic_evals,
                    &config.sampling,
                ),
                _ => unreachable!(),
            };
            updates.push(try_it!(it, update));
        }
        let (next, next_score, adopted, scores) = match config.selection {
            Selection::Naive => {
                let u = &updates[0];
                if u.changed {
                    (u.state.clone(), None, true, None)
                } else {
                    (incumbent.clone(), None, false, None)
                }
            }
            Selection::Validated { .. } => {
                let base = match incumbent_score {
                    Some(s) => s,
                    None => try_it!(it, trainer.score_validation(&incumbent)),
                };
                let mut scores = Vec::new();
                for u in &updates {
                    scores.push(try_it!(it, trainer.score_validation(&u.state)));
                }
                let set = CandidateSet {
                    candidates: updates.iter().map(|u| u.state.clone()).collect(),
                    validation_scores: Some(scores.clone()),
                    incumbent_score: Some(base),
                };
                let sel = select(&incumbent, &set, config.selection).expect("scores computed");
                let ns = sel.candidate_index.map(|i| scores[i]).unwrap_or(base);
                (sel.state, Some(ns), sel.adopted, Some(scores))
            }
        };
        for (v, u) in updates.iter().enumerate() {
            trainer.lineage.push(LineageRecord {
                iteration: it,
                role: PromptRole::Generator,
                candidate_index: v as u32,
                parent_id: incumbent.lineage_id.clone(),
                lineage_id: u.state.lineage_id.clone(),
                body: u.state.body.clone(),
                evaluations: critic_evals.clone(),
                output_feedback: u.feedback.as_ref().map(|f| f.output_feedback.clone()),
                prompt_feedback: u.feedback.as_ref().map(|f| f.prompt_feedback.clone()),
                validation_score: scores.as_ref().map(|s| s[v]),
                adopted: adopted && next.lineage_id == u.state.lineage_id,
            });
        }

        // critic update: always the staged chain, always naive adoption
        let critic_update = try_it!(
            it,
            staged_update(
                &trainer.client,
                templates,
                &critic,
                &meta_records,
                TemplateFamily::CriticMeta,
                &config.sampling,
            )
        );
        trainer.lineage.push(LineageRecord {
            iteration: it,
            role: PromptRole::Critic,
            candidate_index: 0,
            parent_id: critic.lineage_id.clone(),
            lineage_id: critic_update.state.lineage_id.clone(),
            body: critic_update.state.body.clone(),
            evaluations: meta_records,
            output_feedback: critic_update.feedback.as_ref().map(|f| f.output_feedback.clone()),
            prompt_feedback: critic_update.feedback.as_ref().map(|f| f.prompt_feedback.clone()),
            validation_score: None,
            adopted: critic_update.changed,
        });

        let batch_ids: Vec<String> = batch.iter().map(|ex| ex.id.clone()).collect();
        trainer.rows.push(IterationRecord {
            iteration: it,
            prompt_lineage_id: next.lineage_id.clone(),
            batch_example_ids: batch_ids.clone(),
            validation_score: next_score,
            adopted,
        });
        critic_rows.push(IterationRecord {
            iteration: it,
            prompt_lineage_id: critic_update.state.lineage_id.clone(),
            batch_example_ids: batch_ids,
            validation_score: None,
            adopted: critic_update.changed,
        });
        incumbent = next;
        incumbent_score = next_score;
        critic = critic_update.state;
    }

    // final test pass: one set of generator outputs serves both gradings
    let run_test = || -> Result<(f64, f64), BackendError> {
        if dataset.test.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut gen_hits = 0usize;
        let mut critic_hits = 0usize;
        for ex in &dataset.test {
            let output = trainer
                .client
                .complete(&generation_request(&incumbent, ex, &config.sampling))?
                .text;
            let truth = grade_output(ex, &output, GradeAgainst::TrueLabel);
            if truth {
                gen_hits += 1;
            }
            let ce = critic_evaluate(
                &trainer.client,
                templates,
                &critic,
                ex,
                &output,
                critic_kind,
                &config.sampling,
            )?;
            let judged = match ce.kind {
                EvalKind::Critic { score } => {
                    let s = score.unwrap_or(0.0);
                    match critic_kind {
                        CriticKind::Binary => s == 1.0,
                        CriticKind::Smooth => s >= 50.0,
                    }
                }
                _ => unreachable!(),
            };
            if judged == truth {
                critic_hits += 1;
            }
        }
        Ok((
            gen_hits as f64 / dataset.test.len() as f64,
            critic_hits as f64 / dataset.test.len() as f64,
        ))
    };
    let (test_accuracy, critic_accuracy) = match run_test() {
        Ok(pair) => pair,
        Err(e) => return Err(trainer.abort(config.iterations, e)),
    };

    let usage = trainer.client.ledger().snapshot();
    // token split: the critic side owns its evaluation and meta calls
    let critic_usage =
        usage.tag(RequestTag::Critic).tokens + usage.tag(RequestTag::Meta).tokens;
    let generator_usage = TokenUsage {
        input: usage.total.input - critic_usage.input,
        output: usage.total.output - critic_usage.output,
    };
    let (generator_lineage, critic_lineage): (Vec<_>, Vec<_>) = trainer
        .lineage
        .into_iter()
        .partition(|r| r.role == PromptRole::Generator);

    let generator = TrialRun {
        result: TrialResult {
            config: config.clone(),
            per_iteration: trainer.rows,
            final_prompt: incumbent,
            test_accuracy,
            token_usage: generator_usage,
        },
        lineage: generator_lineage,
        usage: usage.clone(),
    };
    let critic_run = TrialRun {
        result: TrialResult {
            config: config.clone(),
            per_iteration: critic_rows,
            final_prompt: critic,
            test_accuracy: critic_accuracy,
            token_usage: critic_usage,
        },
        lineage: critic_lineage,
        usage,
    };
    Ok((generator, critic_run))
}

/// Run whichever trial shape the config calls for.
pub fn run_trial(
    config: &RunConfig,
    dataset: &DatasetSplit,
    backend: Arc<dyn Backend>,
    templates: &TemplateSet,
) -> Result<TrialOutput, Box<TrialError>> {
    if config.evaluation.is_critic() && !config.generation.is_prompt_only() {
        let (generator, critic) = run_critic_co_training(config, dataset, backend, templates)?;
        Ok(TrialOutput::CoTrained { generator, critic })
    } else {
        let run = run_training(config, dataset, backend, templates)?;
        Ok(TrialOutput::Single { run })
    }
}
