//! Experiment plans: a named list of configuration cells with trial counts,
//! run with bounded parallelism, per-trial derived seeds, and resume-safe
//! persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use apo_core::backend::{
    Backend, MockSolverBackend, RecordBackend, ReplayBackend,
};
use apo_core::config::{validate_config, RunConfig};
use apo_core::optimize::{run_trial, TrialOutput};
use apo_core::rng::fnv1a64_fields;
use apo_core::task::{load_dataset, DatasetSplit};
use apo_core::template::TemplateSet;
use apo_stats::Sidedness;

use crate::rundir::{self, ARCHIVE_DIR};
use crate::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanCell {
    pub id: String,
    pub trials: u32,
    pub config: RunConfig,
}

/// A pairwise comparison evaluated by the p-value report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub name: String,
    pub group_a: String,
    pub group_b: String,
    pub sidedness: Sidedness,
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub comparisons: Vec<ComparisonSpec>,
    pub cells: Vec<PlanCell>,
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let plan: ExperimentPlan = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut seen = std::collections::HashSet::new();
        for cell in &self.cells {
            if !seen.insert(&cell.id) {
                return Err(HarnessError::Plan(format!("duplicate cell id {:?}", cell.id)));
            }
            if cell.id.is_empty()
                || !cell.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(HarnessError::Plan(format!(
                    "cell id {:?} must be nonempty [A-Za-z0-9_-]",
                    cell.id
                )));
            }
            if cell.trials == 0 {
                return Err(HarnessError::Plan(format!("cell {:?} has zero trials", cell.id)));
            }
            let violations = validate_config(&cell.config);
            if !violations.is_empty() {
                return Err(HarnessError::Plan(format!(
                    "cell {:?}: {}",
                    cell.id,
                    violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
                )));
            }
        }
        for cmp in &self.comparisons {
            for group in [&cmp.group_a, &cmp.group_b] {
                if !self.cells.iter().any(|c| &c.id == group) {
                    return Err(HarnessError::Plan(format!(
                        "comparison {:?} references unknown cell {:?}",
                        cmp.name, group
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Seed for one trial: a hash of (plan seed, cell id, trial index), so any
/// cell can be re-run alone and reproduce its seeds.
pub fn trial_seed(plan_seed: u64, cell_id: &str, trial_index: u32) -> u64 {
    fnv1a64_fields(&[
        &plan_seed.to_le_bytes(),
        cell_id.as_bytes(),
        &trial_index.to_le_bytes(),
    ])
}

/// How trials obtain their chat backend.
#[derive(Clone)]
pub enum BackendSpec {
    /// The deterministic solver mock, salted with the trial seed.
    Mock,
    /// The mock wrapped in a recording archive inside each trial directory.
    MockRecorded,
    /// Serve every request from the archives of a previous run rooted here.
    Replay { source_root: PathBuf },
    /// A caller-supplied shared backend (live, capturing, ...).
    Shared(Arc<dyn Backend>),
    /// A shared backend, recorded per trial.
    SharedRecorded(Arc<dyn Backend>),
}

impl BackendSpec {
    pub(crate) fn build(
        &self,
        seed: u64,
        relative: &Path,
        dir: &Path,
    ) -> Result<Arc<dyn Backend>, HarnessError> {
        Ok(match self {
            BackendSpec::Mock => Arc::new(MockSolverBackend::new(seed)),
            BackendSpec::MockRecorded => Arc::new(RecordBackend::new(
                Arc::new(MockSolverBackend::new(seed)),
                dir.join(ARCHIVE_DIR),
            )?),
            BackendSpec::Replay { source_root } => {
                Arc::new(ReplayBackend::new(source_root.join(relative).join(ARCHIVE_DIR)))
            }
            BackendSpec::Shared(backend) => Arc::clone(backend),
            BackendSpec::SharedRecorded(backend) => {
                Arc::new(RecordBackend::new(Arc::clone(backend), dir.join(ARCHIVE_DIR))?)
            }
        })
    }
}

#[derive(Debug)]
pub enum TrialStatus {
    /// Ran to completion in this invocation.
    Completed(TrialOutput),
    /// Found already complete on disk; no backend calls were made.
    Resumed(TrialOutput),
    /// Aborted; the error text is recorded and the plan continues.
    Failed(String),
}

#[derive(Debug)]
pub struct TrialRecord {
    pub cell_id: String,
    pub trial_index: u32,
    pub seed: u64,
    pub relative: PathBuf,
    pub dir: PathBuf,
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn output(&self) -> Option<&TrialOutput> {
        match &self.status {
            TrialStatus::Completed(o) | TrialStatus::Resumed(o) => Some(o),
            TrialStatus::Failed(_) => None,
        }
    }
}

struct Slot {
    cell_id: String,
    trial_index: u32,
    seed: u64,
    config: RunConfig,
    relative: PathBuf,
}

fn load_plan_datasets(
    plan: &ExperimentPlan,
) -> Result<BTreeMap<String, Arc<DatasetSplit>>, HarnessError> {
    let mut datasets = BTreeMap::new();
    for cell in &plan.cells {
        let dref = &cell.config.dataset;
        let key = format!(
            "{}|{:?}|{}/{}/{}",
            dref.path.display(),
            dref.task_kind,
            dref.train,
            dref.validation,
            dref.test
        );
        if !datasets.contains_key(&key) {
            let split = load_dataset(&dref.path, dref.task_kind, dref.sizes())
                .map_err(|e| HarnessError::Dataset(format!("{}: {e}", dref.path.display())))?;
            datasets.insert(key, Arc::new(split));
        }
    }
    Ok(datasets)
}

fn dataset_key(config: &RunConfig) -> String {
    let dref = &config.dataset;
    format!(
        "{}|{:?}|{}/{}/{}",
        dref.path.display(),
        dref.task_kind,
        dref.train,
        dref.validation,
        dref.test
    )
}

fn run_slot(
    slot: &Slot,
    output_root: &Path,
    backend_spec: &BackendSpec,
    templates: &TemplateSet,
    dataset: &DatasetSplit,
) -> TrialRecord {
    let dir = output_root.join(&slot.relative);
    let record = |status| TrialRecord {
        cell_id: slot.cell_id.clone(),
        trial_index: slot.trial_index,
        seed: slot.seed,
        relative: slot.relative.clone(),
        dir: dir.clone(),
        status,
    };

    match rundir::load_result(&dir) {
        Ok(Some(output)) => return record(TrialStatus::Resumed(output)),
        Ok(None) => {}
        Err(e) => return record(TrialStatus::Failed(format!("unreadable result: {e}"))),
    }

    let backend = match backend_spec.build(slot.seed, &slot.relative, &dir) {
        Ok(b) => b,
        Err(e) => return record(TrialStatus::Failed(format!("backend: {e}"))),
    };
    match run_trial(&slot.config, dataset, backend, templates) {
        Ok(output) => {
            if let Err(e) = rundir::persist_trial(&dir, &slot.config, &output) {
                return record(TrialStatus::Failed(format!("persist: {e}")));
            }
            record(TrialStatus::Completed(output))
        }
        Err(trial_error) => {
            if let Err(e) = rundir::persist_partial(&dir, &slot.config, &trial_error) {
                log::error!("cannot persist partial trial: {e}");
            }
            record(TrialStatus::Failed(trial_error.to_string()))
        }
    }
}

/// Execute every cell of the plan, at most `parallelism` trials in flight.
///
/// Each trial runs under seed `trial_seed(plan.seed, cell, index)` and
/// persists its artifacts before its record is reported. Trials whose
/// `result.json` already exists are skipped untouched, so re-running a
/// completed plan performs zero backend calls.
pub fn run_plan(
    plan: &ExperimentPlan,
    output_root: &Path,
    backend_spec: &BackendSpec,
    templates: &TemplateSet,
) -> Result<Vec<TrialRecord>, HarnessError> {
    plan.validate()?;
    std::fs::create_dir_all(output_root)?;
    let datasets = load_plan_datasets(plan)?;

    let mut slots = Vec::new();
    for cell in &plan.cells {
        for trial_index in 0..cell.trials {
            let seed = trial_seed(plan.seed, &cell.id, trial_index);
            let mut config = cell.config.clone();
            config.seed = seed;
            slots.push(Slot {
                cell_id: cell.id.clone(),
                trial_index,
                seed,
                relative: rundir::trial_relative_dir(&cell.id, trial_index, &cell.config),
                config,
            });
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<TrialRecord>>> =
        Mutex::new((0..slots.len()).map(|_| None).collect());
    let workers = plan.parallelism.clamp(1, slots.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= slots.len() {
                    break;
                }
                let slot = &slots[i];
                let dataset = &datasets[&dataset_key(&slot.config)];
                let record = run_slot(slot, output_root, backend_spec, templates, dataset);
                results.lock().unwrap()[i] = Some(record);
            });
        }
    });

    let records: Vec<TrialRecord> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot produces a record"))
        .collect();
    for r in &records {
        if let TrialStatus::Failed(message) = &r.status {
            log::warn!("trial {}/{} failed: {message}", r.cell_id, r.trial_index);
        }
    }
    Ok(records)
}

/// Load the records of a previously executed plan from its output root.
pub fn scan_plan_results(
    plan: &ExperimentPlan,
    output_root: &Path,
) -> Result<Vec<TrialRecord>, HarnessError> {
    let mut records = Vec::new();
    for cell in &plan.cells {
        for trial_index in 0..cell.trials {
            let relative = rundir::trial_relative_dir(&cell.id, trial_index, &cell.config);
            let dir = output_root.join(&relative);
            let status = match rundir::load_result(&dir)? {
                Some(output) => TrialStatus::Resumed(output),
                None => TrialStatus::Failed("missing result.json".into()),
            };
            records.push(TrialRecord {
                cell_id: cell.id.clone(),
                trial_index,
                seed: trial_seed(plan.seed, &cell.id, trial_index),
                relative,
                dir,
                status,
            });
        }
    }
    Ok(records)
}
