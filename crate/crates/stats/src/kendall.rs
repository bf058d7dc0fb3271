//! Kendall rank correlation (tau-b) with a trend test.
//!
//! For n <= 8 the p-value comes from exact enumeration of all n! orderings of
//! `y`; beyond that, from the normal approximation with tie-adjusted variance
//! (the Apache-Commons / scipy formulation, no continuity correction).

use thiserror::Error;

use crate::{Sidedness, TestReport};

/// Largest n for which the p-value is computed by exact enumeration.
pub const EXACT_N_LIMIT: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KendallError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two paired observations")]
    TooShort,
    #[error("tau is undefined: all values tied in {0}")]
    AllTied(&'static str),
    #[error("inputs must be finite")]
    NonFinite,
}

/// Concordant-minus-discordant pair count over position pairs.
fn s_statistic(x: &[f64], y: &[f64]) -> i64 {
    // f64::signum maps 0.0 to 1.0, so spell the three-way sign out
    fn sign(d: f64) -> i64 {
        if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        }
    }
    let n = x.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += sign(x[i] - x[j]) * sign(y[i] - y[j]);
        }
    }
    s
}

/// Number of tied pairs: sum over tie groups of t*(t-1)/2.
fn tied_pairs(values: &[f64]) -> u64 {
    tie_groups(values).iter().map(|&t| t * (t - 1) / 2).sum()
}

fn tie_groups(values: &[f64]) -> Vec<u64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups = Vec::new();
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            if run > 1 {
                groups.push(run);
            }
            run = 1;
        }
    }
    if run > 1 {
        groups.push(run);
    }
    groups
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Tie-corrected Kendall tau-b between paired observations.
pub fn tau_b(x: &[f64], y: &[f64]) -> Result<f64, KendallError> {
    check_inputs(x, y)?;
    let n0 = (x.len() * (x.len() - 1) / 2) as f64;
    let tx = tied_pairs(x) as f64;
    let ty = tied_pairs(y) as f64;
    let den = ((n0 - tx) * (n0 - ty)).sqrt();
    Ok((s_statistic(x, y) as f64 / den).clamp(-1.0, 1.0))
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<(), KendallError> {
    if x.len() != y.len() {
        return Err(KendallError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(KendallError::TooShort);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(KendallError::NonFinite);
    }
    let n0 = (x.len() * (x.len() - 1) / 2) as u64;
    if tied_pairs(x) == n0 {
        return Err(KendallError::AllTied("x"));
    }
    if tied_pairs(y) == n0 {
        return Err(KendallError::AllTied("y"));
    }
    Ok(())
}

/// Kendall tau-b trend test.
///
/// The denominator of tau-b is invariant under reordering of `y`, so the
/// exact enumeration compares integer S statistics directly.
pub fn kendall_tau(x: &[f64], y: &[f64], sidedness: Sidedness) -> Result<TestReport, KendallError> {
    check_inputs(x, y)?;
    let n = x.len();
    let tau = tau_b(x, y)?;
    let s_obs = s_statistic(x, y);

    if n <= EXACT_N_LIMIT {
        let mut perm: Vec<f64> = y.to_vec();
        let mut counts = (0u64, 0u64); // (extreme, total)
        heap_permutations(&mut perm, &mut |candidate| {
            let s = s_statistic(x, candidate);
            let hit = match sidedness {
                Sidedness::OneSidedGreater => s >= s_obs,
                Sidedness::OneSidedLess => s <= s_obs,
                Sidedness::TwoSided => s.abs() >= s_obs.abs(),
            };
            counts.1 += 1;
            if hit {
                counts.0 += 1;
            }
        });
        return Ok(TestReport {
            statistic: tau,
            p_value: counts.0 as f64 / counts.1 as f64,
            sidedness,
            n_permutations: counts.1,
            corrected_threshold: None,
            degenerate: false,
        });
    }

    // normal approximation with tie adjustment
    let nf = n as f64;
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let gx = tie_groups(x);
    let gy = tie_groups(y);
    let vt: f64 = gx.iter().map(|&t| { let t = t as f64; t * (t - 1.0) * (2.0 * t + 5.0) }).sum();
    let vu: f64 = gy.iter().map(|&u| { let u = u as f64; u * (u - 1.0) * (2.0 * u + 5.0) }).sum();
    let t1: f64 = gx.iter().map(|&t| (t * (t - 1)) as f64).sum();
    let u1: f64 = gy.iter().map(|&u| (u * (u - 1)) as f64).sum();
    let t2: f64 = gx.iter().map(|&t| (t * (t - 1) * (t.saturating_sub(2))) as f64).sum();
    let u2: f64 = gy.iter().map(|&u| (u * (u - 1) * (u.saturating_sub(2))) as f64).sum();
    let var_s = (v0 - vt - vu) / 18.0
        + t1 * u1 / (2.0 * nf * (nf - 1.0))
        + t2 * u2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let z = s_obs as f64 / var_s.sqrt();
    let p = match sidedness {
        Sidedness::OneSidedGreater => 1.0 - normal_cdf(z),
        Sidedness::OneSidedLess => normal_cdf(z),
        Sidedness::TwoSided => (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0),
    };
    Ok(TestReport {
        statistic: tau,
        p_value: p,
        sidedness,
        n_permutations: 0,
        corrected_threshold: None,
        degenerate: false,
    })
}

fn heap_permutations(items: &mut [f64], visit: &mut impl FnMut(&[f64])) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn perfect_concordance_and_discordance() {
        assert_eq!(tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn tau_matches_reference_values() {
        // scipy.stats.kendalltau statistics
        close(
            tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.666666666667,
            1e-10,
        );
        close(
            tau_b(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0], &[1.0, 2.0, 2.0, 3.0, 3.0, 4.0]).unwrap(),
            0.800640769025,
            1e-10,
        );
        close(
            tau_b(&[12.0, 2.0, 1.0, 12.0, 2.0], &[1.0, 4.0, 7.0, 1.0, 0.0]).unwrap(),
            -0.471404520791,
            1e-10,
        );
    }

    #[test]
    fn asymptotic_p_matches_reference() {
        // n > EXACT_N_LIMIT forces the normal path; scipy asymptotic p-values
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let y = vec![2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0, 9.0];
        let r = kendall_tau(&x, &y, Sidedness::TwoSided).unwrap();
        assert_eq!(r.n_permutations, 0);
        // scipy: tau=0.7777..., p=0.0035664
        close(r.statistic, 7.0 / 9.0, 1e-12);
        close(r.p_value, 2.0 * (1.0 - super::normal_cdf(28.0 / (9.0f64 * 8.0 * 23.0 / 18.0).sqrt())), 1e-12);
    }

    #[test]
    fn exact_p_reference_values() {
        // brute-force reference over all y permutations
        let r = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Sidedness::OneSidedGreater).unwrap();
        close(r.p_value, 1.0 / 6.0, 1e-12);
        assert_eq!(r.n_permutations, 6);

        let x = [3.0, 1.0, 4.0, 1.0, 5.0];
        let y = [2.0, 7.0, 1.0, 8.0, 2.0];
        close(kendall_tau(&x, &y, Sidedness::OneSidedGreater).unwrap().p_value, 0.966666666667, 1e-10);
        close(kendall_tau(&x, &y, Sidedness::OneSidedLess).unwrap().p_value, 0.1, 1e-10);
        close(kendall_tau(&x, &y, Sidedness::TwoSided).unwrap().p_value, 0.2, 1e-10);

        let x = [1.0, 1.0, 2.0, 3.0, 3.0];
        let y = [2.0, 1.0, 2.0, 3.0, 1.0];
        close(kendall_tau(&x, &y, Sidedness::OneSidedGreater).unwrap().p_value, 0.366666666667, 1e-10);
        close(kendall_tau(&x, &y, Sidedness::TwoSided).unwrap().p_value, 0.733333333333, 1e-10);
    }

    #[test]
    fn all_tied_is_an_error() {
        assert_eq!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], Sidedness::TwoSided).unwrap_err(),
            KendallError::AllTied("x")
        );
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0], Sidedness::TwoSided).unwrap_err(),
            KendallError::AllTied("y")
        );
    }
}
