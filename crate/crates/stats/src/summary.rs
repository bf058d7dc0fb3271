//! Point summaries: Bonferroni thresholds and 95% confidence intervals.

use thiserror::Error;

use crate::power::central_t_quantile;
use crate::SampleSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SummaryError {
    #[error("confidence interval needs at least two observations")]
    TooShort,
}

/// Bonferroni-corrected significance threshold for `m` comparisons.
pub fn bonferroni(alpha: f64, m: usize) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
    assert!(m >= 1, "need at least one comparison");
    alpha / m as f64
}

/// Sample mean with a 95% t-interval: mean +/- t_{0.975, n-1} * s / sqrt(n).
pub fn mean_ci95(sample: &SampleSet) -> Result<(f64, f64, f64), SummaryError> {
    let n = sample.len();
    if n < 2 {
        return Err(SummaryError::TooShort);
    }
    let mean = sample.mean();
    let var = sample
        .values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n as f64 - 1.0);
    let half = central_t_quantile(0.975, (n - 1) as f64) * (var / n as f64).sqrt();
    Ok((mean, mean - half, mean + half))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonferroni_thresholds() {
        assert_eq!(bonferroni(0.05, 1), 0.05);
        assert_eq!(bonferroni(0.05, 2), 0.025);
        assert_eq!(bonferroni(0.05, 4), 0.0125);
        assert_eq!(bonferroni(0.05, 8), 0.00625);
    }

    #[test]
    fn constant_sample_has_zero_width() {
        let s = SampleSet::new("c", vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(mean_ci95(&s).unwrap(), (0.5, 0.5, 0.5));
    }

    #[test]
    fn interval_is_symmetric() {
        let s = SampleSet::new("s", vec![0.2, 0.4, 0.9, 0.7]).unwrap();
        let (m, lo, hi) = mean_ci95(&s).unwrap();
        assert!((m - lo - (hi - m)).abs() < 1e-12);
        assert!(lo < m && m < hi);
    }

    #[test]
    fn thirty_draw_fixture_matches_reference() {
        // 30 uniform draws; mean/lo/hi computed independently with scipy
        let values = vec![
            0.321624, 0.418441, 0.279603, 0.684554, 0.259146, 0.58885, 0.585494, 0.138231,
            0.144485, 0.108329, 0.924201, 0.434995, 0.175475, 0.65046, 0.473603, 0.976216,
            0.38894, 0.60434, 0.507902, 0.005479, 0.844462, 0.675, 0.877349, 0.507583, 0.603939,
            0.559093, 0.175215, 0.15452, 0.088881, 0.670405,
        ];
        let s = SampleSet::new("fixture", values).unwrap();
        let (m, lo, hi) = mean_ci95(&s).unwrap();
        assert!((m - 0.460893833333).abs() < 1e-9);
        assert!((lo - 0.360519223585).abs() < 1e-9);
        assert!((hi - 0.561268443081).abs() < 1e-9);
    }

    #[test]
    fn single_observation_is_an_error() {
        let s = SampleSet::new("one", vec![0.3]).unwrap();
        assert_eq!(mean_ci95(&s).unwrap_err(), SummaryError::TooShort);
    }
}
