//! Per-trial run directories.
//!
//! Layout, all plain UTF-8:
//!   config.toml    - the config snapshot this trial actually ran
//!   result.json    - the full TrialOutput; written last, atomically, so its
//!                    presence marks the trial complete
//!   lineage.jsonl  - one JSON object per candidate record
//!   adoptions.csv  - iteration,role,lineage_id,validation_score,adopted
//!   metrics.json   - final accuracies and token totals
//!   ledger.json    - per-tag usage snapshot
//!   partial.json   - present only when the trial aborted
//!   archive/       - request/response archive when recording

use std::io::Write;
use std::path::{Path, PathBuf};

use apo_core::config::RunConfig;
use apo_core::optimize::{LineageRecord, TrialError, TrialOutput, TrialRun};
use sha2::{Digest, Sha256};

use crate::HarnessError;

pub const RESULT_FILE: &str = "result.json";
pub const ARCHIVE_DIR: &str = "archive";

/// Eight hex chars identifying a config, used in directory names.
pub fn config_hash(config: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.to_toml_string().as_bytes());
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// `cell_id/t{index}_{config-hash}` under the output root.
pub fn trial_relative_dir(cell_id: &str, trial_index: u32, config: &RunConfig) -> PathBuf {
    PathBuf::from(cell_id).join(format!("t{trial_index:03}_{}", config_hash(config)))
}

fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

fn adoption_csv(lineage: &[LineageRecord]) -> String {
    let mut out = String::from("iteration,role,lineage_id,validation_score,adopted\n");
    for r in lineage {
        let role = match r.role {
            apo_core::PromptRole::Generator => "generator",
            apo_core::PromptRole::Critic => "critic",
        };
        let score = r.validation_score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, role, r.lineage_id, score, r.adopted
        ));
    }
    out
}

fn runs_of(output: &TrialOutput) -> Vec<(&'static str, &TrialRun)> {
    match output {
        TrialOutput::Single { run } => vec![("generator", run)],
        TrialOutput::CoTrained { generator, critic } => {
            vec![("generator", generator), ("critic", critic)]
        }
    }
}

/// Persist a completed trial. `result.json` lands last.
pub fn persist_trial(dir: &Path, config: &RunConfig, output: &TrialOutput) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), &config.to_toml_string())?;

    let mut lineage_file = std::fs::File::create(dir.join("lineage.jsonl"))?;
    let mut all_lineage = Vec::new();
    for (_, run) in runs_of(output) {
        for record in &run.lineage {
            writeln!(lineage_file, "{}", serde_json::to_string(record)?)?;
            all_lineage.push(record.clone());
        }
    }
    write_atomic(&dir.join("adoptions.csv"), &adoption_csv(&all_lineage))?;

    let primary = output.primary();
    let metrics = match output {
        TrialOutput::Single { run } => serde_json::json!({
            "test_accuracy": run.result.test_accuracy,
            "token_usage": run.result.token_usage,
        }),
        TrialOutput::CoTrained { generator, critic } => serde_json::json!({
            "test_accuracy": generator.result.test_accuracy,
            "critic_test_accuracy": critic.result.test_accuracy,
            "token_usage": generator.result.token_usage,
            "critic_token_usage": critic.result.token_usage,
        }),
    };
    write_atomic(&dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    write_atomic(&dir.join("ledger.json"), &serde_json::to_string_pretty(&primary.usage)?)?;
    write_atomic(&dir.join(RESULT_FILE), &serde_json::to_string_pretty(output)?)?;
    Ok(())
}

/// Persist what an aborted trial left behind.
pub fn persist_partial(dir: &Path, config: &RunConfig, error: &TrialError) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), &config.to_toml_string())?;
    let body = serde_json::json!({
        "failed_at_iteration": error.iteration,
        "error": error.source.to_string(),
        "partial": error.partial,
    });
    write_atomic(&dir.join("partial.json"), &serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

/// Load a completed trial's result, if present.
pub fn load_result(dir: &Path) -> Result<Option<TrialOutput>, HarnessError> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let data = std::fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let config = crate::test_support::mock_config(crate::test_support::MockShape::default());
        assert_eq!(config_hash(&config), config_hash(&config.clone()));
        let mut other = config.clone();
        other.iterations += 1;
        assert_ne!(config_hash(&config), config_hash(&other));
        assert_eq!(config_hash(&config).len(), 8);
    }
}
