//! Per-group accuracy, worst-group accuracy and prevalence-weighted mean
//! accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub per_group_accuracy: Vec<f64>,
    pub worst_group_accuracy: f64,
    pub mean_accuracy: f64,
    pub group_counts: Vec<usize>,
    pub prevalence: Vec<f64>,
}

impl GroupDiagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialize")
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels(probs: &Matrix) -> Vec<usize> {
    probs.iter_rows().map(argmax).collect()
}

/// Per-group accuracy, `None` for groups with no rows.
pub fn group_accuracies(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> (Vec<Option<f64>>, Vec<usize>) {
    let mut correct = vec![0usize; num_groups];
    let mut total = vec![0usize; num_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        total[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    let acc = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    (acc, total)
}

/// Minimum accuracy over the groups that have at least one row.
pub fn worst_present_group_accuracy(accuracies: &[Option<f64>]) -> Option<f64> {
    accuracies.iter().flatten().copied().reduce(f64::min)
}

/// Full diagnostics from predicted labels. Every group must be present.
pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    prevalence: &[f64],
) -> Result<GroupDiagnostics> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(AfrError::invalid(
            "predictions, labels and groups differ in length",
        ));
    }
    let num_groups = prevalence.len();
    if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
        return Err(AfrError::invalid(format!(
            "group {g} has no prevalence entry ({num_groups} given)"
        )));
    }
    let mass: f64 = prevalence.iter().sum();
    if (mass - 1.0).abs() > 1e-9 || prevalence.iter().any(|p| !(*p >= 0.0)) {
        return Err(AfrError::invalid(format!(
            "prevalence must be a distribution (sum {mass})"
        )));
    }

    let (acc, counts) = group_accuracies(predictions, labels, groups, num_groups);
    let missing: Vec<usize> = (0..num_groups).filter(|&g| acc[g].is_none()).collect();
    if !missing.is_empty() {
        return Err(AfrError::MissingGroups { missing });
    }
    let per_group: Vec<f64> = acc.into_iter().flatten().collect();
    let worst = per_group.iter().copied().fold(f64::INFINITY, f64::min);
    let best = per_group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // prevalence mass minus weighted error; for (1.0, 0.5)/(0.9, 0.1) this
    // rounds to 0.95 where the direct weighted sum gives 0.9500000000000001
    let error: f64 = per_group
        .iter()
        .zip(prevalence)
        .map(|(a, p)| (1.0 - a) * p)
        .sum();
    let mean = (mass - error) / mass;
    Ok(GroupDiagnostics {
        per_group_accuracy: per_group,
        worst_group_accuracy: worst,
        // rounding in the weighted sum must not escape the per-group range
        mean_accuracy: mean.clamp(worst, best),
        group_counts: counts,
        prevalence: prevalence.to_vec(),
    })
}

/// Diagnostics from class probabilities (argmax prediction).
pub fn evaluate(
    probs: &Matrix,
    labels: &[usize],
    groups: &[usize],
    prevalence: &[f64],
) -> Result<GroupDiagnostics> {
    evaluate_predictions(&predict_labels(probs), labels, groups, prevalence)
}
