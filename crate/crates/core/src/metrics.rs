//! Evaluation metrics. Binary metrics treat label 1 as the positive class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction/gold length mismatch ({pred} vs {gold})")]
    Length { pred: usize, gold: usize },
    #[error("no examples to score")]
    Empty,
    #[error("label {0} is not binary (expected 0 or 1)")]
    NonBinary(usize),
    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    F1,
    Mcc,
    Pearson,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
            MetricKind::Mcc => "mcc",
            MetricKind::Pearson => "pearson",
        }
    }

    pub fn is_regression(self) -> bool {
        self == MetricKind::Pearson
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            "f1" => Ok(MetricKind::F1),
            "mcc" | "matthews" => Ok(MetricKind::Mcc),
            "pearson" => Ok(MetricKind::Pearson),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

fn check_len(pred: usize, gold: usize) -> Result<(), MetricError> {
    if pred != gold {
        return Err(MetricError::Length { pred, gold });
    }
    if pred == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// `[tp, tn, fp, fn]`
fn confusion(pred: &[usize], gold: &[usize]) -> Result<[u64; 4], MetricError> {
    check_len(pred.len(), gold.len())?;
    let mut c = [0u64; 4];
    for (&p, &g) in pred.iter().zip(gold) {
        if p > 1 {
            return Err(MetricError::NonBinary(p));
        }
        if g > 1 {
            return Err(MetricError::NonBinary(g));
        }
        let idx = match (p, g) {
            (1, 1) => 0,
            (0, 0) => 1,
            (1, 0) => 2,
            _ => 3,
        };
        c[idx] += 1;
    }
    Ok(c)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64, MetricError> {
    check_len(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `2TP / (2TP + FP + FN)`, or 0 when the denominator vanishes.
pub fn f1_binary(pred: &[usize], gold: &[usize]) -> Result<f64, MetricError> {
    let [tp, _, fp, fn_] = confusion(pred, gold)?;
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 })
}

/// Matthews correlation, or 0 when any marginal is empty.
pub fn matthews_corr(pred: &[usize], gold: &[usize]) -> Result<f64, MetricError> {
    let [tp, tn, fp, fn_] = confusion(pred, gold)?;
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return Ok(0.0);
    }
    let num = tp as f64 * tn as f64 - fp as f64 * fn_ as f64;
    let den = factors.iter().map(|&f| f as f64).product::<f64>().sqrt();
    Ok(num / den)
}

/// Sample Pearson correlation; errors when either side has zero variance.
pub fn pearson_corr(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    check_len(pred.len(), gold.len())?;
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = gold.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(gold) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Rounding in the mean leaves a constant vector with tiny nonzero spread.
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if sxx == 0.0 || constant(pred) {
        return Err(MetricError::ZeroVariance("predictions"));
    }
    if syy == 0.0 || constant(gold) {
        return Err(MetricError::ZeroVariance("gold scores"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_with_inexact_mean_is_zero_variance() {
        let x = [0.1; 7];
        assert_eq!(
            pearson_corr(&x, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
            Err(MetricError::ZeroVariance("predictions"))
        );
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    /// Rebuild (pred, gold) vectors from confusion counts.
    fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> (Vec<usize>, Vec<usize>) {
        let mut p = vec![];
        let mut g = vec![];
        for (n, pv, gv) in [(tp, 1, 1), (tn, 0, 0), (fp, 1, 0), (fn_, 0, 1)] {
            p.extend(std::iter::repeat_n(pv, n));
            g.extend(std::iter::repeat_n(gv, n));
        }
        (p, g)
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 2], &[1, 0, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 0]), Err(MetricError::Length { .. })));
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        let (p, g) = from_counts(2, 0, 1, 1);
        assert!(close(f1_binary(&p, &g).unwrap(), 2.0 / 3.0));
        assert_eq!(f1_binary(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert_eq!(f1_binary(&[2, 0], &[1, 0]), Err(MetricError::NonBinary(2)));
    }

    #[test]
    fn mcc_examples() {
        assert!(close(matthews_corr(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0));
        let (p, g) = from_counts(1, 1, 1, 1);
        assert_eq!(matthews_corr(&p, &g).unwrap(), 0.0);
        let (p, g) = from_counts(3, 2, 1, 1);
        assert!(close(matthews_corr(&p, &g).unwrap(), 5.0 / 12.0));
        assert_eq!(matthews_corr(&[1, 1], &[1, 1]).unwrap(), 0.0);
        assert_eq!(matthews_corr(&[0, 3], &[0, 1]), Err(MetricError::NonBinary(3)));
    }

    #[test]
    fn pearson_examples() {
        assert!(close(pearson_corr(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0));
        assert!(close(pearson_corr(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), -1.0));
        assert!(close(pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5));
        assert!(matches!(
            pearson_corr(&[1.0, 1.0], &[0.0, 2.0]),
            Err(MetricError::ZeroVariance(_))
        ));
    }

    fn binary_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..2, n),
                proptest::collection::vec(0usize..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn binary_metrics_permutation_invariant((p, g) in binary_pair(), rot in 0usize..60) {
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut g2 = g.clone();
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.reverse();
            g2.reverse();
            prop_assert_eq!(accuracy(&p, &g).unwrap(), accuracy(&p2, &g2).unwrap());
            prop_assert_eq!(f1_binary(&p, &g).unwrap(), f1_binary(&p2, &g2).unwrap());
            prop_assert_eq!(matthews_corr(&p, &g).unwrap(), matthews_corr(&p2, &g2).unwrap());
        }

        #[test]
        fn mcc_invariant_under_polarity_swap((p, g) in binary_pair()) {
            let flip = |v: &[usize]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
            let a = matthews_corr(&p, &g).unwrap();
            let b = matthews_corr(&flip(&p), &flip(&g)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn pearson_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.1f64..5.0, b in -3.0f64..3.0, c in 0.1f64..5.0, d in -3.0f64..3.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            let r = match pearson_corr(&xs, &ys) { Ok(r) => r, Err(_) => return Ok(()) };
            let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let ys2: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
            let r2 = pearson_corr(&xs2, &ys2).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
        }
    }
}
