//! Per-example reweighting coefficients and the diagnostics derived from
//! them.
//!
//! Every scheme produces a normalized [`WeightVector`] over the reweighting
//! set. The default scheme is the exponential form
//!
//! ```text
//! μᵢ = β_{yᵢ} exp(−γ p̂ᵢ) / Σⱼ β_{yⱼ} exp(−γ p̂ⱼ),    β_y = 1 / #{i : yᵢ = y}
//! ```
//!
//! where `p̂ᵢ` is the stage-1 probability of the true class. Weights are
//! computed once from fixed inputs and never depend on the parameters being
//! retrained.

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::Matrix;

/// Clamp applied before raising `p̂` to a negative power.
pub const POWER_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// `β_y exp(−γ p̂)`.
    AfrExponential,
    /// `β_y (1 − p̂)^γ`.
    Focal,
    /// `β_y p̂^(−γ)`.
    Power,
    /// `β_y` alone; the exponential form at γ = 0.
    ClassBalancedOnly,
    /// Error-set upweighting: `λ/|E|` on misclassified rows, `1/|Eᶜ|` on the rest.
    JttBinary,
    /// `1/|G_g|`; needs group labels.
    OracleGroupBalanced,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::AfrExponential => "afr_exponential",
            SchemeKind::Focal => "focal",
            SchemeKind::Power => "power",
            SchemeKind::ClassBalancedOnly => "class_balanced_only",
            SchemeKind::JttBinary => "jtt_binary",
            SchemeKind::OracleGroupBalanced => "oracle_group_balanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_upweight")]
    pub upweight_lambda: f64,
}

fn default_upweight() -> f64 {
    1.0
}

impl WeightScheme {
    pub fn new(kind: SchemeKind, gamma: f64) -> Self {
        Self {
            kind,
            gamma,
            upweight_lambda: 1.0,
        }
    }

    pub fn afr(gamma: f64) -> Self {
        Self::new(SchemeKind::AfrExponential, gamma)
    }

    pub fn class_balanced() -> Self {
        Self::new(SchemeKind::ClassBalancedOnly, 0.0)
    }

    pub fn oracle_group_balanced() -> Self {
        Self::new(SchemeKind::OracleGroupBalanced, 0.0)
    }

    pub fn jtt(upweight_lambda: f64) -> Self {
        Self {
            kind: SchemeKind::JttBinary,
            gamma: 0.0,
            upweight_lambda,
        }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(AfrError::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.upweight_lambda > 0.0) || !self.upweight_lambda.is_finite() {
            return Err(AfrError::invalid(format!(
                "upweight_lambda must be > 0, got {}",
                self.upweight_lambda
            )));
        }
        Ok(())
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Normalizes nonnegative raw weights.
    pub fn from_unnormalized(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(AfrError::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(AfrError::invalid(
                "weights have zero or non-finite total mass",
            ));
        }
        Ok(Self(raw.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `p̂ᵢ = probs[i, yᵢ]`.
pub fn correct_class_probs(probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != labels.len() {
        return Err(AfrError::invalid(
            "probability rows and labels differ in length",
        ));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = probs.row(i);
            if y >= row.len() {
                return Err(AfrError::invalid(format!(
                    "label {y} out of range for {} classes",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(AfrError::invalid(format!(
                    "probability row {i} sums to {total}"
                )));
            }
            Ok(row[y])
        })
        .collect()
}

/// `β_y = 1 / count_y`, counted over `labels`.
fn class_balance(labels: &[usize]) -> Vec<f64> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
        .into_iter()
        .map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect()
}

/// Computes weights over the reweighting set.
///
/// `p_hat` may contain exact 0 or 1: a saturated softmax produces them and
/// every functional form stays finite there (the power form clamps).
pub fn compute_weights(
    scheme: &WeightScheme,
    p_hat: &[f64],
    labels: &[usize],
    correct: Option<&[bool]>,
    groups: Option<&[usize]>,
) -> Result<WeightVector> {
    scheme.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(AfrError::invalid("cannot weight an empty set"));
    }
    if p_hat.len() != n {
        return Err(AfrError::invalid("p_hat and labels differ in length"));
    }
    if let Some(bad) = p_hat.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(AfrError::invalid(format!(
            "p_hat value {bad} outside [0, 1]"
        )));
    }

    let gamma = scheme.gamma;
    let raw: Vec<f64> = match scheme.kind {
        SchemeKind::AfrExponential
        | SchemeKind::Focal
        | SchemeKind::Power
        | SchemeKind::ClassBalancedOnly => {
            let beta = class_balance(labels);
            let factor = |p: f64| match scheme.kind {
                SchemeKind::AfrExponential => (-gamma * p).exp(),
                SchemeKind::Focal => (1.0 - p).powf(gamma),
                SchemeKind::Power => p.clamp(POWER_CLAMP, 1.0 - POWER_CLAMP).powf(-gamma),
                _ => 1.0,
            };
            p_hat
                .iter()
                .zip(labels)
                .map(|(&p, &y)| beta[y] * factor(p))
                .collect()
        }
        SchemeKind::JttBinary => {
            let correct = correct.ok_or_else(|| {
                AfrError::invalid("jtt_binary weights need the prediction-correctness vector")
            })?;
            if correct.len() != n {
                return Err(AfrError::invalid("correctness vector has the wrong length"));
            }
            let n_err = correct.iter().filter(|c| !**c).count();
            let n_ok = n - n_err;
            correct
                .iter()
                .map(|&ok| {
                    if ok {
                        1.0 / n_ok as f64
                    } else {
                        scheme.upweight_lambda / n_err as f64
                    }
                })
                .collect()
        }
        SchemeKind::OracleGroupBalanced => {
            let groups = groups.ok_or_else(|| {
                AfrError::invalid("oracle_group_balanced weights need group labels")
            })?;
            if groups.len() != n {
                return Err(AfrError::invalid("group vector has the wrong length"));
            }
            let n_groups = groups.iter().max().map_or(0, |m| m + 1);
            let mut sizes = vec![0usize; n_groups];
            for &g in groups {
                sizes[g] += 1;
            }
            groups.iter().map(|&g| 1.0 / sizes[g] as f64).collect()
        }
    };
    WeightVector::from_unnormalized(raw)
}

/// Total weight mass per group, `Σ_{i: gᵢ = g} μᵢ`.
pub fn group_aggregated_weights(
    mu: &WeightVector,
    groups: &[usize],
    num_groups: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; num_groups];
    for (&w, &g) in mu.as_slice().iter().zip(groups) {
        out[g] += w;
    }
    out
}

/// Kish effective sample size `(Σμ)² / Σμ²`, which is `1 / Σμ²` for
/// normalized weights. Weights are rescaled by their maximum first so that
/// uniform and one-hot vectors give exactly `M` and `1`.
pub fn effective_sample_size(mu: &WeightVector) -> f64 {
    let max = mu.as_slice().iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let (sum, sum_sq) = mu
        .as_slice()
        .iter()
        .map(|w| w / max)
        .fold((0.0, 0.0), |(s, q), r| (s + r, q + r * r));
    sum * sum / sum_sq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_correct_class() {
        let probs = Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        assert_eq!(correct_class_probs(&probs, &[0]).unwrap(), vec![0.9]);
        assert_eq!(correct_class_probs(&probs, &[1]).unwrap(), vec![0.1]);
        assert!(correct_class_probs(&probs, &[2]).is_err());
    }

    #[test]
    fn gather_matches_loop() {
        let probs = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.2, 0.3, 0.5],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let labels = [2, 1, 0, 2];
        let mut expected = Vec::new();
        for i in 0..4 {
            for c in 0..3 {
                if c == labels[i] {
                    expected.push(probs.get(i, c));
                }
            }
        }
        assert_eq!(correct_class_probs(&probs, &labels).unwrap(), expected);
    }

    #[test]
    fn gamma_zero_is_class_balanced() {
        let mu = compute_weights(
            &WeightScheme::afr(0.0),
            &[0.2, 0.9, 0.5, 0.7],
            &[0, 0, 0, 1],
            None,
            None,
        )
        .unwrap();
        let w = mu.as_slice();
        for &v in &w[..3] {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((w[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_exponential() {
        let mu =
            compute_weights(&WeightScheme::afr(1.0), &[0.9, 0.5], &[0, 0], None, None).unwrap();
        let (a, b) = ((-0.9f64).exp(), (-0.5f64).exp());
        assert!((mu.as_slice()[0] - a / (a + b)).abs() < 1e-15);
        assert!((mu.as_slice()[0] - 0.4013).abs() < 1e-4);
        assert!((mu.as_slice()[1] - 0.5987).abs() < 1e-4);
    }

    #[test]
    fn oracle_balanced_groups() {
        let mu = compute_weights(
            &WeightScheme::oracle_group_balanced(),
            &[0.5; 4],
            &[0, 0, 1, 1],
            None,
            Some(&[0, 1, 0, 1]),
        )
        .unwrap();
        assert_eq!(mu.as_slice(), &[0.25; 4]);
        assert!(compute_weights(
            &WeightScheme::oracle_group_balanced(),
            &[0.5; 2],
            &[0, 1],
            None,
            None
        )
        .is_err());
    }

    #[test]
    fn jtt_matches_two_term_loss() {
        // λ/|E| on errors and 1/|Eᶜ| on the rest
        let correct = [true, false, true, true];
        let mu = compute_weights(
            &WeightScheme::jtt(5.0),
            &[0.5; 4],
            &[0; 4],
            Some(&correct),
            None,
        )
        .unwrap();
        let raw = [1.0 / 3.0, 5.0, 1.0 / 3.0, 1.0 / 3.0];
        let total: f64 = raw.iter().sum();
        for (w, r) in mu.as_slice().iter().zip(raw) {
            assert!((w - r / total).abs() < 1e-15);
        }
        assert!(compute_weights(&WeightScheme::jtt(5.0), &[0.5; 4], &[0; 4], None, None).is_err());
    }

    #[test]
    fn power_form_is_finite_at_zero() {
        let mu = compute_weights(
            &WeightScheme::new(SchemeKind::Power, 2.0),
            &[0.0, 1.0, 0.5],
            &[0, 0, 0],
            None,
            None,
        )
        .unwrap();
        assert!(mu.as_slice().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn rejects_out_of_range_probabilities() {
        assert!(compute_weights(&WeightScheme::afr(1.0), &[1.5], &[0], None, None).is_err());
        assert!(compute_weights(&WeightScheme::afr(-1.0), &[0.5], &[0], None, None).is_err());
    }

    #[test]
    fn aggregated_weights() {
        let mu = WeightVector::uniform(4);
        assert_eq!(
            group_aggregated_weights(&mu, &[0, 1, 1, 1], 2),
            vec![0.25, 0.75]
        );
        let onehot = WeightVector::from_unnormalized(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            group_aggregated_weights(&onehot, &[0, 1, 2], 3),
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&WeightVector::uniform(10)), 10.0);
        let onehot = WeightVector::from_unnormalized(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(effective_sample_size(&onehot), 1.0);
        let mu = WeightVector::from_unnormalized(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((effective_sample_size(&mu) - 1.0 / 0.375).abs() < 1e-12);
    }
}
