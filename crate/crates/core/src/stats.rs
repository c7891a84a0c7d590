//! Summary statistics, quantiles and interval helpers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// A closed interval `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lower <= other.lower && other.upper <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation with divisor `n - 1`.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Standard normal quantile `z_p`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Empirical quantile of already-sorted values by linear interpolation
/// between order statistics (Hyndman and Fan type 7).
///
/// With `n` values and 1-based order statistics `x(1) <= … <= x(n)`:
/// `h = (n − 1)·p + 1`, `lo = ⌊h⌋`, and
/// `Q(p) = x(lo) + (h − lo)·(x(lo+1) − x(lo))`, with `Q(p) = x(n)` when
/// `lo >= n`. These are the exact floating-point operations performed.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p + 1.0;
    let lo = h.floor();
    let lo_idx = lo as usize; // 1-based
    if lo_idx >= n {
        return sorted[n - 1];
    }
    let a = sorted[lo_idx - 1];
    let b = sorted[lo_idx];
    a + (h - lo) * (b - a)
}

/// Percentile interval `[Q(α/2), Q(1 − α/2)]` of a bootstrap distribution.
/// `None` when fewer than two finite values are supplied or `alpha` is
/// outside (0, 1).
pub fn percentile_ci(values: &[f64], alpha: f64) -> Option<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) || values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Interval { lower: quantile_sorted(&sorted, alpha / 2.0), upper: quantile_sorted(&sorted, 1.0 - alpha / 2.0) })
}

/// Normal-approximation interval `estimate ± z_{1−α/2}·se`.
pub fn normal_ci(estimate: f64, se: f64, alpha: f64) -> Option<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) || !se.is_finite() || se < 0.0 || !estimate.is_finite() {
        return None;
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    Some(Interval { lower: estimate - z * se, upper: estimate + z * se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let ci = percentile_ci(&v, 0.1).unwrap();
        assert!((ci.lower - 5.95).abs() < 1e-12 && (ci.upper - 95.05).abs() < 1e-12);
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        let ci = percentile_ci(&v, 0.05).unwrap();
        assert!((ci.lower - 5.975).abs() < 1e-12 && (ci.upper - 195.025).abs() < 1e-12);
        let ci = percentile_ci(&[4.2; 7], 0.1).unwrap();
        assert_eq!((ci.lower, ci.upper), (4.2, 4.2));
    }

    #[test]
    fn percentile_unavailable() {
        assert!(percentile_ci(&[1.0], 0.1).is_none());
        assert!(percentile_ci(&[1.0, f64::NAN, 2.0], 0.1).is_none());
        assert!(percentile_ci(&[1.0, 2.0], 0.0).is_none());
    }

    #[test]
    fn normal_ci_examples() {
        let ci = normal_ci(5.0, 1.0, 0.1).unwrap();
        assert!((ci.lower - 3.355).abs() < 1e-3 && (ci.upper - 6.645).abs() < 1e-3);
        let ci = normal_ci(0.0, 1.0, 0.05).unwrap();
        assert!((ci.upper - 1.959_96).abs() < 1e-5 && (ci.lower + 1.959_96).abs() < 1e-5);
        let ci = normal_ci(2.0, 0.0, 0.05).unwrap();
        assert_eq!((ci.lower, ci.upper), (2.0, 2.0));
    }

    #[test]
    fn sd_uses_n_minus_one() {
        assert!((sample_sd(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn wider_alpha_nests(values in prop::collection::vec(-1e3f64..1e3, 2..60), a in 0.01f64..0.5, b in 0.01f64..0.5) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let wide = percentile_ci(&values, lo).unwrap();
            let narrow = percentile_ci(&values, hi).unwrap();
            prop_assert!(wide.contains_interval(&narrow));
        }
    }
}
