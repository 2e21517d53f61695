//! Multinomial logistic last layer trained on frozen embeddings.
//!
//! The retraining objective is
//!
//! ```text
//! L(φ) = Σᵢ wᵢ · xe(xᵢ, yᵢ; φ) + λ ‖φ − φ̂‖²
//! ```
//!
//! where `φ = (W, b)` covers weights and bias, `φ̂` is the stage-1 head the
//! retrained head starts from, and the per-example coefficients `wᵢ` come
//! from the objective: `1/N` for ERM, the normalized weight vector `μ` for
//! reweighted training, and `1/N_g` on the currently worst group for the
//! group-DRO objective. Parameters flatten as `W` row-major followed by `b`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, Reader};
use crate::error::{AfrError, Result};
use crate::metrics::{argmax, group_accuracies, worst_present_group_accuracy};
use crate::numerics::{clip_in_place, lse_unchecked, softmax_into, Matrix};
use crate::weights::WeightVector;

pub const HEAD_MAGIC: &[u8; 4] = b"AFRH";
pub const HEAD_VERSION: u32 = 1;

/// Linear classifier `softmax(W x + b)` together with the frozen anchor
/// `(Ŵ, b̂)` it is regularized toward.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    weights: Matrix,
    bias: Vec<f64>,
    anchor_weights: Matrix,
    anchor_bias: Vec<f64>,
}

impl LinearHead {
    /// A head sitting at its own anchor.
    pub fn from_anchor(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(AfrError::invalid(format!(
                "weights have {} rows but bias has {} entries",
                weights.rows(),
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(AfrError::invalid("bias is not finite"));
        }
        Ok(Self {
            anchor_weights: weights.clone(),
            anchor_bias: bias.clone(),
            weights,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self::from_anchor(Matrix::zeros(num_classes, dim), vec![0.0; num_classes]).unwrap()
    }

    fn from_parts(
        weights: Matrix,
        bias: Vec<f64>,
        anchor_weights: Matrix,
        anchor_bias: Vec<f64>,
    ) -> Result<Self> {
        let c = weights.rows();
        let d = weights.cols();
        if bias.len() != c
            || anchor_weights.rows() != c
            || anchor_weights.cols() != d
            || anchor_bias.len() != c
        {
            return Err(AfrError::invalid("head parameter shapes disagree"));
        }
        Ok(Self {
            weights,
            bias,
            anchor_weights,
            anchor_bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn anchor_weights(&self) -> &Matrix {
        &self.anchor_weights
    }

    pub fn anchor_bias(&self) -> &[f64] {
        &self.anchor_bias
    }

    pub fn num_params(&self) -> usize {
        self.num_classes() * (self.dim() + 1)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.as_slice().to_vec();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn anchor_params(&self) -> Vec<f64> {
        let mut p = self.anchor_weights.as_slice().to_vec();
        p.extend_from_slice(&self.anchor_bias);
        p
    }

    /// Same anchor, new current parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return Err(AfrError::invalid("parameter vector has the wrong length"));
        }
        let split = self.weights.as_slice().len();
        Ok(Self {
            weights: Matrix::new(self.num_classes(), self.dim(), params[..split].to_vec())?,
            bias: params[split..].to_vec(),
            anchor_weights: self.anchor_weights.clone(),
            anchor_bias: self.anchor_bias.clone(),
        })
    }

    /// `‖φ − φ̂‖₂`.
    pub fn distance_to_anchor(&self) -> f64 {
        self.anchor_penalty().sqrt()
    }

    fn anchor_penalty(&self) -> f64 {
        self.params()
            .iter()
            .zip(self.anchor_params())
            .map(|(p, a)| (p - a) * (p - a))
            .sum()
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(AfrError::invalid(format!(
                "features have {} columns, head expects {}",
                features.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.check_features(features)?;
        Ok(features.affine_transposed(&self.weights, &self.bias))
    }
}

/// Class probabilities `softmax(W x + b)`, one row per example.
pub fn predict_probs(head: &LinearHead, features: &Matrix) -> Result<Matrix> {
    let mut logits = head.logits(features)?;
    let c = head.num_classes();
    let mut buf = vec![0.0; c];
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), &mut buf);
        logits.row_mut(r).copy_from_slice(&buf);
    }
    Ok(logits)
}

fn check_labels(head: &LinearHead, features: &Matrix, labels: &[usize]) -> Result<()> {
    head.check_features(features)?;
    if features.rows() != labels.len() {
        return Err(AfrError::invalid("features and labels differ in length"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= head.num_classes()) {
        return Err(AfrError::invalid(format!("label {y} out of range")));
    }
    Ok(())
}

/// Per-example cross-entropy `log Σ exp(z) − z_y`.
fn per_example_ce(logits: &Matrix, labels: &[usize]) -> Vec<f64> {
    logits
        .iter_rows()
        .zip(labels)
        .map(|(z, &y)| lse_unchecked(z) - z[y])
        .collect()
}

/// Mean cross-entropy.
pub fn loss_erm(head: &LinearHead, features: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(head, features, labels)?;
    if labels.is_empty() {
        return Err(AfrError::invalid("empty batch"));
    }
    let ce = per_example_ce(&head.logits(features)?, labels);
    Ok(ce.iter().sum::<f64>() / labels.len() as f64)
}

/// `Σ μᵢ xeᵢ + λ ‖φ − φ̂‖²`.
pub fn loss_afr(
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    mu: &WeightVector,
    lambda: f64,
) -> Result<f64> {
    check_labels(head, features, labels)?;
    if mu.len() != labels.len() {
        return Err(AfrError::invalid(
            "weight vector and labels differ in length",
        ));
    }
    let ce = per_example_ce(&head.logits(features)?, labels);
    let weighted: f64 = ce.iter().zip(mu.as_slice()).map(|(l, w)| l * w).sum();
    Ok(weighted + lambda * head.anchor_penalty())
}

/// Within-group mean cross-entropy for each of `num_groups` groups.
fn group_losses(ce: &[f64], groups: &[usize], num_groups: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; num_groups];
    let mut count = vec![0usize; num_groups];
    for (&l, &g) in ce.iter().zip(groups) {
        if g >= num_groups {
            return Err(AfrError::invalid(format!("group {g} out of range")));
        }
        sum[g] += l;
        count[g] += 1;
    }
    let empty: Vec<usize> = (0..num_groups).filter(|&g| count[g] == 0).collect();
    if !empty.is_empty() {
        return Err(AfrError::invalid(format!(
            "groups {empty:?} are empty in this batch"
        )));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Lowest-index group attaining the maximum loss.
fn worst_group(losses: &[f64]) -> usize {
    argmax(losses)
}

/// Largest within-group mean cross-entropy.
pub fn loss_gdro(
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64> {
    check_labels(head, features, labels)?;
    if groups.len() != labels.len() {
        return Err(AfrError::invalid("groups and labels differ in length"));
    }
    let ce = per_example_ce(&head.logits(features)?, labels);
    let losses = group_losses(&ce, groups, num_groups)?;
    Ok(losses[worst_group(&losses)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Erm,
    Afr,
    Gdro,
}

/// A training objective with its side inputs. Every objective adds the
/// anchor term `λ ‖φ − φ̂‖²`; pass `λ = 0` for the bare loss.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Erm,
    Afr {
        mu: &'a WeightVector,
    },
    Gdro {
        groups: &'a [usize],
        num_groups: usize,
    },
}

impl Objective<'_> {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Erm => ObjectiveKind::Erm,
            Objective::Afr { .. } => ObjectiveKind::Afr,
            Objective::Gdro { .. } => ObjectiveKind::Gdro,
        }
    }
}

/// Per-example coefficients `wᵢ` the objective puts on the cross-entropy at
/// the current parameters.
fn example_coefficients(objective: &Objective<'_>, ce: &[f64]) -> Result<Vec<f64>> {
    let n = ce.len();
    match *objective {
        Objective::Erm => Ok(vec![1.0 / n as f64; n]),
        Objective::Afr { mu } => {
            if mu.len() != n {
                return Err(AfrError::invalid(
                    "weight vector and labels differ in length",
                ));
            }
            Ok(mu.as_slice().to_vec())
        }
        Objective::Gdro { groups, num_groups } => {
            if groups.len() != n {
                return Err(AfrError::invalid("groups and labels differ in length"));
            }
            let losses = group_losses(ce, groups, num_groups)?;
            let worst = worst_group(&losses);
            let size = groups.iter().filter(|&&g| g == worst).count() as f64;
            Ok(groups
                .iter()
                .map(|&g| if g == worst { 1.0 / size } else { 0.0 })
                .collect())
        }
    }
}

/// Objective value and its analytic gradient with respect to the flat
/// parameter vector. For the group-DRO objective the gradient is taken
/// through the worst group (lowest index on ties).
pub fn value_and_gradient(
    objective: &Objective<'_>,
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_labels(head, features, labels)?;
    if labels.is_empty() {
        return Err(AfrError::invalid("empty batch"));
    }
    let c = head.num_classes();
    let d = head.dim();
    let logits = head.logits(features)?;
    let ce = per_example_ce(&logits, labels);
    let coef = example_coefficients(objective, &ce)?;

    let mut value = 0.0;
    let mut grad = vec![0.0; c * (d + 1)];
    let (gw, gb) = grad.split_at_mut(c * d);
    let mut p = vec![0.0; c];
    for i in 0..labels.len() {
        let w = coef[i];
        if w == 0.0 {
            continue;
        }
        value += w * ce[i];
        softmax_into(logits.row(i), &mut p);
        p[labels[i]] -= 1.0;
        let x = features.row(i);
        for k in 0..c {
            let delta = w * p[k];
            gb[k] += delta;
            for (g, &xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                *g += delta * xj;
            }
        }
    }
    if lambda != 0.0 {
        let params = head.params();
        let anchor = head.anchor_params();
        let mut penalty = 0.0;
        for ((g, p), a) in grad.iter_mut().zip(&params).zip(&anchor) {
            let diff = p - a;
            penalty += diff * diff;
            *g += 2.0 * lambda * diff;
        }
        value += lambda * penalty;
    }
    Ok((value, grad))
}

pub fn gradient(
    objective: &Objective<'_>,
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    lambda: f64,
) -> Result<Vec<f64>> {
    value_and_gradient(objective, head, features, labels, lambda).map(|(_, g)| g)
}

pub fn objective_value(
    objective: &Objective<'_>,
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    lambda: f64,
) -> Result<f64> {
    value_and_gradient(objective, head, features, labels, lambda).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub lambda: f64,
    pub grad_clip_norm: f64,
    pub early_stopping: bool,
    pub objective: ObjectiveKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_epochs: 300,
            lambda: 0.0,
            grad_clip_norm: 1.0,
            early_stopping: true,
            objective: ObjectiveKind::Afr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(AfrError::invalid("learning_rate must be > 0"));
        }
        if self.max_epochs == 0 {
            return Err(AfrError::invalid("max_epochs must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(AfrError::invalid("lambda must be >= 0"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(AfrError::invalid("grad_clip_norm must be > 0"));
        }
        Ok(())
    }
}

/// Group-annotated rows scored after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub groups: &'a [usize],
    pub num_groups: usize,
}

impl<'a> Validation<'a> {
    pub fn new(
        features: &'a Matrix,
        labels: &'a [usize],
        groups: &'a [usize],
        num_groups: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(AfrError::invalid("validation set is empty"));
        }
        if features.rows() != labels.len() || groups.len() != labels.len() {
            return Err(AfrError::invalid("validation arrays differ in length"));
        }
        Ok(Self {
            features,
            labels,
            groups,
            num_groups,
        })
    }

    /// Per-group accuracy (`None` where a group has no rows) and the worst
    /// accuracy over present groups.
    pub fn score(&self, head: &LinearHead) -> Result<(Vec<Option<f64>>, f64)> {
        let logits = head.logits(self.features)?;
        let preds: Vec<usize> = logits.iter_rows().map(argmax).collect();
        let (acc, _) = group_accuracies(&preds, self.labels, self.groups, self.num_groups);
        let wga = worst_present_group_accuracy(&acc).expect("validation set is nonempty");
        Ok((acc, wga))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective value at this epoch's parameters.
    pub loss: f64,
    pub val_group_accuracy: Vec<Option<f64>>,
    pub val_wga: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch 0 is the starting point; epoch k follows k gradient steps.
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub head: LinearHead,
}

impl TrainReport {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }
}

/// Full-batch gradient descent on the last layer.
///
/// Each epoch computes the gradient of the objective, clips it to
/// `grad_clip_norm` and takes one step of size `learning_rate`. With early
/// stopping and a validation set, the parameters of the epoch with the best
/// validation worst-group accuracy (earliest on ties) are returned;
/// otherwise those of the last epoch.
pub fn train(
    head: &LinearHead,
    features: &Matrix,
    labels: &[usize],
    objective: &Objective<'_>,
    config: &TrainConfig,
    validation: Option<&Validation<'_>>,
) -> Result<TrainReport> {
    config.validate()?;
    if objective.kind() != config.objective {
        return Err(AfrError::invalid(format!(
            "objective {:?} does not match config {:?}",
            objective.kind(),
            config.objective
        )));
    }
    let mut current = head.clone();
    let mut params = current.params();
    let mut epochs = Vec::with_capacity(config.max_epochs + 1);
    let mut best: Option<(f64, usize, LinearHead)> = None;

    for epoch in 0..=config.max_epochs {
        let (loss, mut grad) =
            value_and_gradient(objective, &current, features, labels, config.lambda)?;
        if !loss.is_finite() {
            return Err(AfrError::Divergence { epoch, loss });
        }
        let (val_group_accuracy, val_wga) = match validation {
            Some(v) => {
                let (acc, wga) = v.score(&current)?;
                (acc, Some(wga))
            }
            None => (Vec::new(), None),
        };
        if let Some(wga) = val_wga {
            if best.as_ref().is_none_or(|(b, _, _)| wga > *b) {
                best = Some((wga, epoch, current.clone()));
            }
        }
        epochs.push(EpochRecord {
            epoch,
            loss,
            val_group_accuracy,
            val_wga,
        });
        if epoch == config.max_epochs {
            break;
        }

        clip_in_place(&mut grad, config.grad_clip_norm);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(AfrError::Divergence {
                epoch: epoch + 1,
                loss: f64::NAN,
            });
        }
        current = current.with_params(&params)?;
    }

    let (selected_epoch, head) = match best {
        Some((_, epoch, head)) if config.early_stopping => (epoch, head),
        _ => (config.max_epochs, current),
    };
    Ok(TrainReport {
        epochs,
        selected_epoch,
        head,
    })
}

/// `AFRH` container: magic | version u32 | C u32 | D u32 | W | b | Ŵ | b̂,
/// all as little-endian f64.
pub fn encode_head(head: &LinearHead) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 16 * head.num_params());
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(head.dim() as u32).to_le_bytes());
    put_f64s(&mut out, head.weights.as_slice());
    put_f64s(&mut out, &head.bias);
    put_f64s(&mut out, head.anchor_weights.as_slice());
    put_f64s(&mut out, &head.anchor_bias);
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<LinearHead> {
    let mut r = Reader::new(bytes);
    r.expect_magic(HEAD_MAGIC)?;
    r.expect_version(HEAD_VERSION)?;
    let c = r.u32()? as usize;
    let d = r.u32()? as usize;
    let w = r.f64s(c * d)?;
    let b = r.f64s(c)?;
    let aw = r.f64s(c * d)?;
    let ab = r.f64s(c)?;
    r.expect_end()?;
    LinearHead::from_parts(Matrix::new(c, d, w)?, b, Matrix::new(c, d, aw)?, ab)
}

pub fn write_head_file(head: &LinearHead, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_head(head))?;
    Ok(())
}

pub fn read_head_file(path: impl AsRef<Path>) -> Result<LinearHead> {
    decode_head(&fs::read(path)?)
}
