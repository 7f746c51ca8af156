//! Small statistics helpers for multi-seed summaries.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// One-sided paired t-test of H₁: mean(a − b) < 0. Returns the p-value;
/// degenerate inputs (fewer than two pairs, zero spread) fall back to 0/1
/// by the sign of the mean difference.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired test needs equal lengths");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let m = mean(&diffs);
    let s = std_dev(&diffs);
    if n < 2 || s == 0.0 {
        return if m < 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    dist.cdf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clearly_smaller_sample_is_significant() {
        let a = [0.1, 0.12, 0.09, 0.11, 0.1];
        let b = [0.3, 0.29, 0.33, 0.31, 0.3];
        assert!(paired_t_less(&a, &b) < 0.001);
        assert!(paired_t_less(&b, &a) > 0.999);
    }

    #[test]
    fn equal_samples_are_not_significant() {
        let a = [0.2, 0.21, 0.19, 0.2, 0.2];
        let p = paired_t_less(&a, &a);
        assert!(p >= 0.5);
    }
}
