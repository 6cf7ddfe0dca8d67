//! Binary log loss, its class-weighted form, and balanced class weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// Per-class multipliers for the weighted log loss. `positive` scales the
/// `y·log ŷ` term (label 1, Tumor), `negative` the `(1-y)·log(1-ŷ)` term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl ClassWeights {
    pub fn new(positive: f64, negative: f64) -> Result<Self> {
        let w = ClassWeights { positive, negative };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("positive", self.positive), ("negative", self.negative)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!(
                    "{name} class weight must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_inputs(labels: &[u8], probs: &[f64]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::contract("log loss of an empty batch"));
    }
    if labels.len() != probs.len() {
        return Err(Error::dim(format!(
            "{} labels but {} probabilities",
            labels.len(),
            probs.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::contract(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Shared by the plain functions and the graph op so both report identical
/// values. `None` means the unweighted loss.
pub(crate) fn bce_value(labels: &[u8], probs: &[f64], weights: Option<ClassWeights>) -> f64 {
    let mut total = 0.0;
    for (&y, &p) in labels.iter().zip(probs) {
        let y = f64::from(y);
        let p = clamp_prob(p);
        let pos = y * p.ln();
        let neg = (1.0 - y) * (1.0 - p).ln();
        total += match weights {
            None => -(pos + neg),
            Some(w) => -(w.positive * pos + w.negative * neg),
        };
    }
    total / labels.len() as f64
}

/// d loss / d probs, scaled by `upstream`. Zero where the clamp is active.
pub(crate) fn bce_grad(
    labels: &[u8],
    probs: &[f64],
    weights: Option<ClassWeights>,
    upstream: f64,
) -> Vec<f64> {
    let n = labels.len() as f64;
    let (wp, wn) = weights.map_or((1.0, 1.0), |w| (w.positive, w.negative));
    labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                return 0.0;
            }
            let y = f64::from(y);
            upstream * (-wp * y / p + wn * (1.0 - y) / (1.0 - p)) / n
        })
        .collect()
}

/// Mean binary cross-entropy of class-1 probabilities.
pub fn log_loss(labels: &[u8], probs: &[f64]) -> Result<f64> {
    check_inputs(labels, probs)?;
    Ok(bce_value(labels, probs, None))
}

/// Mean binary cross-entropy with per-class weights on the two terms.
pub fn weighted_log_loss(labels: &[u8], probs: &[f64], weights: ClassWeights) -> Result<f64> {
    check_inputs(labels, probs)?;
    weights.validate()?;
    Ok(bce_value(labels, probs, Some(weights)))
}

/// Balanced inverse-frequency weights, `w_c = (n+ + n-) / (2 · n_c)`.
pub fn compute_class_weights(count_positive: usize, count_negative: usize) -> Result<ClassWeights> {
    if count_positive == 0 || count_negative == 0 {
        return Err(Error::contract(format!(
            "class counts must be nonzero, got ({count_positive}, {count_negative})"
        )));
    }
    let total = (count_positive + count_negative) as f64;
    ClassWeights::new(
        total / (2.0 * count_positive as f64),
        total / (2.0 * count_negative as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn log_loss_examples() {
        assert!(log_loss(&[1], &[1.0 - PROB_EPS]).unwrap() < 1e-6);
        assert!(close(log_loss(&[1], &[0.5]).unwrap(), 2f64.ln(), 1e-12));
        let expected = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
        assert!(close(expected, 0.164252, 1e-6));
        assert!(close(log_loss(&[1, 0], &[0.9, 0.2]).unwrap(), expected, 1e-15));
    }

    #[test]
    fn log_loss_errors() {
        assert!(matches!(log_loss(&[], &[]), Err(Error::Contract(_))));
        assert!(log_loss(&[1, 0], &[0.5]).is_err());
        assert!(log_loss(&[2], &[0.5]).is_err());
    }

    #[test]
    fn clamping_keeps_loss_finite() {
        let l = log_loss(&[1, 0], &[0.0, 1.0]).unwrap();
        assert!(l.is_finite());
        assert!(close(l, -(PROB_EPS.ln()), 1e-9));
    }

    #[test]
    fn weighted_examples() {
        let unit = ClassWeights::new(1.0, 1.0).unwrap();
        assert_eq!(
            weighted_log_loss(&[1, 0, 1], &[0.3, 0.6, 0.99], unit).unwrap(),
            log_loss(&[1, 0, 1], &[0.3, 0.6, 0.99]).unwrap()
        );
        let w = ClassWeights::new(2.0, 1.0).unwrap();
        assert!(close(weighted_log_loss(&[1], &[0.5], w).unwrap(), 1.386294, 1e-6));
        let w = ClassWeights::new(2.0, 0.5).unwrap();
        // Direct evaluation: (2·(−ln 0.9) + 0.5·(−ln 0.8)) / 2
        let expected = (2.0 * -(0.9f64.ln()) + 0.5 * -(0.8f64.ln())) / 2.0;
        assert!(close(expected, 0.161147, 1e-6));
        assert!(close(weighted_log_loss(&[1, 0], &[0.9, 0.2], w).unwrap(), expected, 1e-15));
    }

    #[test]
    fn nonpositive_weight_rejected() {
        assert!(ClassWeights::new(0.0, 1.0).is_err());
        let w = ClassWeights { positive: 1.0, negative: -1.0 };
        assert!(weighted_log_loss(&[1], &[0.5], w).is_err());
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(
            compute_class_weights(100, 100).unwrap(),
            ClassWeights { positive: 1.0, negative: 1.0 }
        );
        let w = compute_class_weights(124, 78).unwrap();
        assert!(close(w.positive, 202.0 / 248.0, 1e-15));
        assert!(close(w.negative, 202.0 / 156.0, 1e-15));
        assert!(close(w.positive, 0.814516, 1e-6));
        assert!(close(w.negative, 1.294872, 1e-6));
        let w = compute_class_weights(1, 3).unwrap();
        assert!(close(w.positive, 2.0, 1e-15));
        assert!(close(w.negative, 0.666667, 1e-6));
        assert!(compute_class_weights(0, 3).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = [1u8, 0, 1, 0];
        let probs = [0.3, 0.45, 0.8, 0.1];
        for weights in [None, Some(ClassWeights { positive: 1.7, negative: 0.4 })] {
            let g = bce_grad(&labels, &probs, weights, 1.0);
            for i in 0..probs.len() {
                let h = 1e-5;
                let mut up = probs;
                let mut down = probs;
                up[i] += h;
                down[i] -= h;
                let num = (bce_value(&labels, &up, weights) - bce_value(&labels, &down, weights))
                    / (2.0 * h);
                let rel = (g[i] - num).abs() / (g[i].abs() + num.abs()).max(1e-8);
                assert!(rel < 1e-4, "coord {i}: {} vs {num}", g[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn unit_weights_reduce_to_log_loss(
            cases in proptest::collection::vec((0u8..=1, 0.0f64..1.0), 1..20)
        ) {
            let (labels, probs): (Vec<u8>, Vec<f64>) = cases.into_iter().unzip();
            let unit = ClassWeights { positive: 1.0, negative: 1.0 };
            prop_assert_eq!(
                weighted_log_loss(&labels, &probs, unit).unwrap(),
                log_loss(&labels, &probs).unwrap()
            );
        }

        #[test]
        fn effective_mass_is_preserved(pos in 1usize..10_000, neg in 1usize..10_000) {
            let w = compute_class_weights(pos, neg).unwrap();
            let mass = w.positive * pos as f64 + w.negative * neg as f64;
            prop_assert!((mass - (pos + neg) as f64).abs() < 1e-9 * (pos + neg) as f64);
            if pos < neg {
                prop_assert!(w.positive > w.negative);
            }
        }

        #[test]
        fn monotone_in_each_weight(
            cases in proptest::collection::vec((0u8..=1, 0.01f64..0.99), 1..10),
            w1 in 0.1f64..5.0,
            bump in 0.0f64..5.0,
        ) {
            let (labels, probs): (Vec<u8>, Vec<f64>) = cases.into_iter().unzip();
            let base = ClassWeights { positive: w1, negative: w1 };
            let l0 = weighted_log_loss(&labels, &probs, base).unwrap();
            let lp = weighted_log_loss(&labels, &probs, ClassWeights { positive: w1 + bump, ..base }).unwrap();
            let ln = weighted_log_loss(&labels, &probs, ClassWeights { negative: w1 + bump, ..base }).unwrap();
            prop_assert!(lp >= l0 - 1e-12);
            prop_assert!(ln >= l0 - 1e-12);
        }
    }
}
