//! Statistical toolkit for comparing prompt-optimization trial results.
//!
//! Everything here operates on plain `f64` samples (typically per-trial test
//! accuracies) and is deterministic: permutation sampling takes an explicit
//! seed, and the power computations are closed-form to within the series
//! tolerances documented on each function.

mod kendall;
mod permutation;
mod power;
mod rng;
mod summary;

pub use kendall::{kendall_tau, KendallError};
pub use permutation::{permutation_t_test, welch_t, PermutationError, PermutationScheme};
pub use power::{disjunctive_power, noncentral_t_cdf, solve_effect_size, t_test_power};
pub use summary::{bonferroni, mean_ci95, SummaryError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A labeled set of observations, e.g. the test accuracies of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("sample set {0:?} is empty")]
pub struct EmptySample(pub String);

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, EmptySample> {
        let label = label.into();
        if values.is_empty() {
            return Err(EmptySample(label));
        }
        Ok(Self { label, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Which tail(s) of the null distribution count as evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Alternative: group A exceeds group B.
    OneSidedGreater,
    /// Alternative: group A falls below group B.
    OneSidedLess,
    TwoSided,
}

impl Sidedness {
    /// The sidedness that yields the same p-value when the groups are swapped.
    pub fn mirrored(self) -> Self {
        match self {
            Sidedness::OneSidedGreater => Sidedness::OneSidedLess,
            Sidedness::OneSidedLess => Sidedness::OneSidedGreater,
            Sidedness::TwoSided => Sidedness::TwoSided,
        }
    }
}

/// Outcome of one hypothesis test, pairable with a Bonferroni threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub sidedness: Sidedness,
    /// Number of relabelings inspected: the full count in exact mode, the
    /// resample count otherwise, and 0 for purely analytic p-values.
    pub n_permutations: u64,
    /// Filled in by the reporting layer once the comparison family is known.
    pub corrected_threshold: Option<f64>,
    /// Set when a degenerate-input convention decided the p-value.
    pub degenerate: bool,
}
