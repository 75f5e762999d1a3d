//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::normal_quantile;

/// Precision/recall breakdown of a set prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when both sets are empty.
    pub f1: Option<f64>,
}

/// F1 of a predicted set against the true set. Inputs need not be sorted.
pub fn f1(predicted: &[usize], truth: &[usize]) -> F1Score {
    let mut p = predicted.to_vec();
    let mut t = truth.to_vec();
    p.sort_unstable();
    p.dedup();
    t.sort_unstable();
    t.dedup();
    let (mut i, mut j, mut tp) = (0, 0, 0);
    while i < p.len() && j < t.len() {
        match p[i].cmp(&t[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                tp += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let (fp, fn_) = (p.len() - tp, t.len() - tp);
    let f1 = if p.is_empty() && t.is_empty() { None } else { Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64) };
    F1Score { tp, fp, fn_, f1 }
}

/// `(1/d) * sum (est - truth)^2`.
pub fn mse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", est.len(), truth.len())));
    }
    if est.is_empty() {
        return Err(Error::EmptyInput("no entries".into()));
    }
    Ok(est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / est.len() as f64)
}

/// Per-target mean frequencies for the item gain ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgrInputs {
    pub f_before: Vec<f64>,
    pub f_recovery: Vec<f64>,
    pub f_base: Vec<f64>,
    pub r: usize,
}

/// Target gain after recovery over `r` times the baseline attack's gain.
pub fn igr(x: &IgrInputs) -> Result<f64> {
    let r = x.r;
    if r == 0 || x.f_before.len() != r || x.f_recovery.len() != r || x.f_base.len() != r {
        return Err(invalid("IGR inputs must all have r >= 1 entries"));
    }
    let num: f64 = x.f_recovery.iter().zip(&x.f_before).map(|(a, b)| a - b).sum();
    let den: f64 = x.f_base.iter().zip(&x.f_before).map(|(a, b)| a - b).sum();
    if den <= 0.0 {
        return Err(invalid(format!("baseline gain {den} is not positive; IGR withheld")));
    }
    Ok(num / (den * r as f64))
}

/// Fraction correct with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Wilson score interval for `k` successes of `n` at normal quantile `z`.
pub fn wilson(k: usize, n: usize, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let ph = k / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let centre = (ph + z2 / (2.0 * n)) / den;
    let half = z / den * (ph * (1.0 - ph) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Accuracy over `(detected, attacked)` outcomes.
pub fn detection_accuracy(outcomes: &[(bool, bool)]) -> Result<Accuracy> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("no detection outcomes".into()));
    }
    let correct = outcomes.iter().filter(|(d, a)| d == a).count();
    let total = outcomes.len();
    let (ci_lo, ci_hi) = wilson(correct, total, normal_quantile(0.975));
    Ok(Accuracy { correct, total, value: correct as f64 / total as f64, ci_lo, ci_hi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[1, 2, 3], &[3, 2, 1]).f1, Some(1.0));
        let pred: Vec<usize> = (0..10).collect();
        let truth: Vec<usize> = (2..12).collect();
        let s = f1(&pred, &truth);
        assert_eq!((s.tp, s.fp, s.fn_), (8, 2, 2));
        assert!((s.f1.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(f1(&[1], &[2]).f1, Some(0.0));
        assert_eq!(f1(&[], &[]).f1, None);
        assert_eq!(f1(&[4], &[]).f1, Some(0.0));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        assert!((mse(&[0.3, 0.4], &[0.1, 0.2]).unwrap() - 0.04).abs() < 1e-15);
        assert!(mse(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn igr_examples() {
        let before = vec![0.1, 0.2];
        let base = vec![0.15, 0.25];
        let x = IgrInputs { f_before: before.clone(), f_recovery: before.clone(), f_base: base.clone(), r: 2 };
        assert_eq!(igr(&x).unwrap(), 0.0);
        let x = IgrInputs { f_recovery: base.clone(), ..x };
        assert!((igr(&x).unwrap() - 0.5).abs() < 1e-12);
        let x = IgrInputs { f_base: before.clone(), ..x };
        assert!(igr(&x).is_err());
    }

    #[test]
    fn igr_scales_linearly() {
        let r = 10;
        let before = vec![0.0; r];
        let base = vec![0.01; r];
        let rec = vec![0.03; r];
        let x = IgrInputs { f_before: before, f_recovery: rec, f_base: base, r };
        assert!((igr(&x).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn wilson_reference_intervals() {
        let all: Vec<(bool, bool)> = (0..40).map(|i| (i < 20, i < 20)).collect();
        let a = detection_accuracy(&all).unwrap();
        assert_eq!(a.value, 1.0);
        assert!((a.ci_lo - 0.9124).abs() < 5e-4 && a.ci_hi == 1.0);
        let half: Vec<(bool, bool)> = (0..40).map(|i| (i % 2 == 0, true)).collect();
        let a = detection_accuracy(&half).unwrap();
        assert_eq!(a.value, 0.5);
        assert!((a.ci_lo - 0.352).abs() < 1e-3 && (a.ci_hi - 0.648).abs() < 1e-3);
        let none: Vec<(bool, bool)> = (0..40).map(|_| (true, false)).collect();
        assert_eq!(detection_accuracy(&none).unwrap().value, 0.0);
    }
}
