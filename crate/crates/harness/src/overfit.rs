//! The long-training experiment: track train, test, and corrupted-train
//! accuracy across every iteration of an extended run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use apo_core::backend::LlmClient;
use apo_core::config::RunConfig;
use apo_core::optimize::{generation_request, grade_output, GradeAgainst, TrainingSession};
use apo_core::prompt::PromptState;
use apo_core::task::DatasetSplit;
use apo_core::template::TemplateSet;

use crate::plan::BackendSpec;
use crate::HarnessError;

/// Accuracies of the prompt entering an iteration: row 0 is the default
/// prompt, so the emitted table has exactly `iterations` rows per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitRow {
    pub trial: u32,
    pub iteration: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Accuracy of the same train-split outputs graded against the seeded
    /// corrupted labels.
    pub corrupted_train_accuracy: f64,
}

fn triple_accuracy(
    client: &LlmClient,
    prompt: &PromptState,
    dataset: &DatasetSplit,
    config: &RunConfig,
) -> Result<(f64, f64, f64), apo_core::BackendError> {
    // one generation pass over the train split serves both gradings
    let mut train_hits = 0usize;
    let mut corrupted_hits = 0usize;
    for ex in &dataset.train {
        let output = client.complete(&generation_request(prompt, ex, &config.sampling))?.text;
        if grade_output(ex, &output, GradeAgainst::TrueLabel) {
            train_hits += 1;
        }
        if grade_output(ex, &output, GradeAgainst::CorruptedLabel) {
            corrupted_hits += 1;
        }
    }
    let mut test_hits = 0usize;
    for ex in &dataset.test {
        let output = client.complete(&generation_request(prompt, ex, &config.sampling))?.text;
        if grade_output(ex, &output, GradeAgainst::TrueLabel) {
            test_hits += 1;
        }
    }
    let n_train = dataset.train.len().max(1) as f64;
    let n_test = dataset.test.len().max(1) as f64;
    Ok((
        train_hits as f64 / n_train,
        test_hits as f64 / n_test,
        corrupted_hits as f64 / n_train,
    ))
}

/// Run one extended trial, grading the incumbent at the start of every
/// iteration. Emits `config.iterations` rows.
pub fn run_overfit_trial(
    config: &RunConfig,
    dataset: &DatasetSplit,
    backend_spec: &BackendSpec,
    output_root: &Path,
    trial: u32,
    templates: &TemplateSet,
) -> Result<Vec<OverfitRow>, HarnessError> {
    let seed = crate::plan::trial_seed(config.seed, "overfit", trial);
    let mut config = config.clone();
    config.seed = seed;
    let relative = Path::new("overfit").join(format!("t{trial:03}"));
    let dir = output_root.join(&relative);
    std::fs::create_dir_all(&dir)?;
    let backend = backend_spec.build(seed, &relative, &dir)?;

    let mut session = TrainingSession::new(&config, dataset, backend, templates);
    let mut rows = Vec::with_capacity(config.iterations as usize);
    for it in 0..config.iterations {
        let (train_accuracy, test_accuracy, corrupted_train_accuracy) =
            triple_accuracy(session.client(), session.incumbent(), dataset, &config)
                .map_err(HarnessError::Backend)?;
        rows.push(OverfitRow {
            trial,
            iteration: it,
            train_accuracy,
            test_accuracy,
            corrupted_train_accuracy,
        });
        session.step().map_err(|e| HarnessError::Trial(e.to_string()))?;
    }
    let run = session.finish().map_err(|e| HarnessError::Trial(e.to_string()))?;
    crate::rundir::persist_trial(
        &dir,
        &config,
        &apo_core::optimize::TrialOutput::Single { run },
    )?;
    Ok(rows)
}

/// Run `trials` extended trials and collect every curve row.
pub fn run_overfit_experiment(
    config: &RunConfig,
    dataset: &DatasetSplit,
    backend_spec: &BackendSpec,
    output_root: &Path,
    trials: u32,
    templates: &TemplateSet,
) -> Result<Vec<OverfitRow>, HarnessError> {
    let mut rows = Vec::new();
    for trial in 0..trials {
        rows.extend(run_overfit_trial(
            config,
            dataset,
            backend_spec,
            output_root,
            trial,
            templates,
        )?);
    }
    Ok(rows)
}

/// CSV for the curve rows: trial,iteration,train,test,corrupted_train.
pub fn overfit_csv(rows: &[OverfitRow]) -> String {
    let mut out = String::from("trial,iteration,train_accuracy,test_accuracy,corrupted_train_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.trial, r.iteration, r.train_accuracy, r.test_accuracy, r.corrupted_train_accuracy
        ));
    }
    out
}
