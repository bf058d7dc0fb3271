//! Permutation t-tests over two independent samples.
//!
//! The statistic is the Welch (unequal-variance) t; the null distribution is
//! built by relabeling the pooled observations. Exact mode enumerates every
//! split of the pool; sampled mode draws relabelings with a seeded generator
//! and counts the observed labeling once so the reported p is never zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::{SampleSet, Sidedness, TestReport};

/// Largest number of splits exact mode will enumerate.
pub const EXACT_ENUMERATION_LIMIT: u64 = 200_000;

/// Relative slack when deciding whether a permuted statistic is at least as
/// extreme as the observed one; absorbs float noise from reordered sums.
const EXTREME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationScheme {
    /// Enumerate all C(n_a + n_b, n_a) splits of the pooled sample.
    Exact,
    /// Draw `resamples` random relabelings from the given seed.
    Sampled { resamples: u64, seed: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PermutationError {
    #[error("sample {0:?} is empty")]
    EmptySample(String),
    #[error("exact enumeration would need {splits} splits; limit is {limit}")]
    ExactTooLarge { splits: u64, limit: u64 },
    #[error("sampled mode needs at least one resample")]
    ZeroResamples,
}

/// Welch two-sample t statistic.
///
/// Degenerate denominators follow the conventions the permutation counting
/// relies on: equal means with zero pooled spread give 0, otherwise the
/// statistic is signed infinity.
pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let num = ma - mb;
    let den = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(num)
        }
    } else {
        num / den
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

fn is_extreme(perm: f64, observed: f64, sidedness: Sidedness) -> bool {
    let slack = EXTREME_EPS * observed.abs().max(1.0);
    match sidedness {
        Sidedness::OneSidedGreater => perm >= observed - slack,
        Sidedness::OneSidedLess => perm <= observed + slack,
        Sidedness::TwoSided => perm.abs() >= observed.abs() - slack,
    }
}

/// Number of splits exact mode must visit, saturating at `u64::MAX`.
pub fn exact_split_count(n_a: usize, n_b: usize) -> u64 {
    let n = n_a + n_b;
    let k = n_a.min(n_b);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Two-sample permutation test with the Welch t statistic.
///
/// The degenerate all-constant pool (zero variance in both samples, equal
/// means) yields p = 1 and sets the report's `degenerate` flag.
pub fn permutation_t_test(
    a: &SampleSet,
    b: &SampleSet,
    sidedness: Sidedness,
    scheme: PermutationScheme,
) -> Result<TestReport, PermutationError> {
    if a.is_empty() {
        return Err(PermutationError::EmptySample(a.label.clone()));
    }
    if b.is_empty() {
        return Err(PermutationError::EmptySample(b.label.clone()));
    }

    let observed = welch_t(&a.values, &b.values);
    let mut pool: Vec<f64> = Vec::with_capacity(a.len() + b.len());
    pool.extend_from_slice(&a.values);
    pool.extend_from_slice(&b.values);
    let n_a = a.len();

    let degenerate = pool.iter().all(|&v| v == pool[0]);
    if degenerate {
        return Ok(TestReport {
            statistic: 0.0,
            p_value: 1.0,
            sidedness,
            n_permutations: 0,
            corrected_threshold: None,
            degenerate: true,
        });
    }

    let (p_value, n_permutations) = match scheme {
        PermutationScheme::Exact => {
            let splits = exact_split_count(n_a, b.len());
            if splits > EXACT_ENUMERATION_LIMIT {
                return Err(PermutationError::ExactTooLarge {
                    splits,
                    limit: EXACT_ENUMERATION_LIMIT,
                });
            }
            let mut extreme = 0u64;
            let mut total = 0u64;
            for_each_split(&pool, n_a, |ga, gb| {
                total += 1;
                if is_extreme(welch_t(ga, gb), observed, sidedness) {
                    extreme += 1;
                }
            });
            debug_assert_eq!(total, splits);
            (extreme as f64 / total as f64, total)
        }
        PermutationScheme::Sampled { resamples, seed } => {
            if resamples == 0 {
                return Err(PermutationError::ZeroResamples);
            }
            let mut rng = SplitMix64::new(seed);
            let mut scratch = pool.clone();
            let mut extreme = 0u64;
            for _ in 0..resamples {
                rng.partial_shuffle(&mut scratch, n_a);
                let t = welch_t(&scratch[..n_a], &scratch[n_a..]);
                if is_extreme(t, observed, sidedness) {
                    extreme += 1;
                }
            }
            // The observed labeling counts as one permutation.
            ((extreme + 1) as f64 / (resamples + 1) as f64, resamples)
        }
    };

    Ok(TestReport {
        statistic: observed,
        p_value,
        sidedness,
        n_permutations,
        corrected_threshold: None,
        degenerate: false,
    })
}

/// Visit every split of `pool` into a group of `n_a` and its complement.
/// Subsets are enumerated in lexicographic index order, so the identity
/// labeling (first `n_a` indices) is always included.
fn for_each_split(pool: &[f64], n_a: usize, mut visit: impl FnMut(&[f64], &[f64])) {
    let n = pool.len();
    let mut idx: Vec<usize> = (0..n_a).collect();
    let mut ga = vec![0.0; n_a];
    let mut gb = vec![0.0; n - n_a];
    loop {
        let mut bi = 0;
        let mut next = 0;
        for (slot, &i) in idx.iter().enumerate() {
            ga[slot] = pool[i];
            while next < i {
                gb[bi] = pool[next];
                bi += 1;
                next += 1;
            }
            next = i + 1;
        }
        while next < n {
            gb[bi] = pool[next];
            bi += 1;
            next += 1;
        }
        visit(&ga, &gb);

        // advance to the next combination
        let mut pos = n_a;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            if idx[pos] != pos + n - n_a {
                break;
            }
            if pos == 0 {
                return;
            }
        }
        idx[pos] += 1;
        for j in pos + 1..n_a {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
