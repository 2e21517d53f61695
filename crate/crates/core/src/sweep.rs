//! Grid search over (γ, λ, learning rate) selected by validation
//! worst-group accuracy, and the validation-subsampling curve built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{subsample_validation, EmbeddingDataset, Split};
use crate::error::{AfrError, Result};
use crate::head::{
    predict_probs, train, LinearHead, Objective, ObjectiveKind, TrainConfig, Validation,
};
use crate::metrics::{evaluate, predict_labels, GroupDiagnostics};
use crate::numerics::{mean_and_std, Matrix, Rng};
use crate::weights::{
    compute_weights, correct_class_probs, effective_sample_size, group_aggregated_weights,
    SchemeKind, WeightScheme, WeightVector,
};

/// Stage-2 view of a cached-embedding dataset: the reweighting split with
/// its stage-1 predictions, plus validation and test splits.
#[derive(Debug, Clone)]
pub struct Stage2Data {
    pub rw: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Stage-1 probability of the true class on each RW row.
    pub p_hat: Vec<f64>,
    /// Stage-1 probabilities on RW rows.
    pub rw_probs: Matrix,
    /// Whether the stage-1 head classifies each RW row correctly.
    pub rw_correct: Vec<bool>,
    /// Group fractions over the training rows (ERM ∪ RW).
    pub prevalence: Vec<f64>,
}

impl Stage2Data {
    pub fn new(dataset: &EmbeddingDataset, stage1: &LinearHead) -> Result<Self> {
        if dataset.split_tags().is_none() {
            return Err(AfrError::invalid("dataset has no split tags"));
        }
        let rw = dataset.part(Split::Rw);
        if rw.is_empty() {
            return Err(AfrError::invalid("reweighting split is empty"));
        }
        let rw_probs = predict_probs(stage1, rw.features())?;
        let p_hat = correct_class_probs(&rw_probs, rw.labels())?;
        let rw_correct = predict_labels(&rw_probs)
            .iter()
            .zip(rw.labels())
            .map(|(p, y)| p == y)
            .collect();
        let mut train_rows = dataset.indices_of(Split::Erm);
        train_rows.extend(dataset.indices_of(Split::Rw));
        let prevalence = dataset.subset(&train_rows).group_proportions();
        Ok(Self {
            val: dataset.part(Split::Val),
            test: dataset.part(Split::Test),
            rw,
            p_hat,
            rw_probs,
            rw_correct,
            prevalence,
        })
    }

    pub fn weights(&self, scheme: &WeightScheme) -> Result<WeightVector> {
        compute_weights(
            scheme,
            &self.p_hat,
            self.rw.labels(),
            Some(&self.rw_correct),
            self.rw.groups(),
        )
    }

    pub fn evaluate_test(&self, head: &LinearHead) -> Result<GroupDiagnostics> {
        let groups = self
            .test
            .groups()
            .ok_or_else(|| AfrError::invalid("test split has no group labels"))?;
        evaluate(
            &predict_probs(head, self.test.features())?,
            self.test.labels(),
            groups,
            &self.prevalence,
        )
    }
}

/// Outcome of one retraining run of a stage-2 configuration.
#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub head: LinearHead,
    pub selected_epoch: usize,
    pub val_wga: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Retrains the last layer on the RW split under `config.objective`, using
/// `mu` for the reweighted objective and RW group labels for group DRO.
pub fn retrain(
    stage1: &LinearHead,
    data: &Stage2Data,
    mu: &WeightVector,
    val: Option<&EmbeddingDataset>,
    config: &TrainConfig,
) -> Result<Stage2Run> {
    let rw = &data.rw;
    let objective = match config.objective {
        ObjectiveKind::Erm => Objective::Erm,
        ObjectiveKind::Afr => Objective::Afr { mu },
        ObjectiveKind::Gdro => Objective::Gdro {
            groups: rw
                .groups()
                .ok_or_else(|| AfrError::invalid("group DRO needs RW group labels"))?,
            num_groups: rw.num_groups(),
        },
    };
    let validation = match val {
        Some(v) if !v.is_empty() => Some(Validation::new(
            v.features(),
            v.labels(),
            v.groups()
                .ok_or_else(|| AfrError::invalid("validation split has no group labels"))?,
            v.num_groups(),
        )?),
        _ => None,
    };
    let report = train(
        stage1,
        rw.features(),
        rw.labels(),
        &objective,
        config,
        validation.as_ref(),
    )?;
    Ok(Stage2Run {
        val_wga: report.selected().val_wga,
        selected_epoch: report.selected_epoch,
        epoch_losses: report.epochs.iter().map(|e| e.loss).collect(),
        head: report.head,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub scheme: SchemeKind,
    /// Used for the JTT scheme only.
    #[serde(default = "one")]
    pub upweight_lambda: f64,
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub validation_fraction: f64,
    pub seeds: Vec<u64>,
}

fn one() -> f64 {
    1.0
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty()
            || self.lambdas.is_empty()
            || self.learning_rates.is_empty()
            || self.seeds.is_empty()
        {
            return Err(AfrError::invalid("sweep grids and seeds must be nonempty"));
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(AfrError::invalid("gamma grid entries must be >= 0"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(AfrError::invalid("lambda grid entries must be >= 0"));
        }
        if self.learning_rates.iter().any(|l| !(*l > 0.0)) {
            return Err(AfrError::invalid("learning rates must be > 0"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return Err(AfrError::invalid("validation_fraction must be in (0, 1]"));
        }
        self.train.validate()
    }

    fn grid(&self) -> Vec<(f64, f64, f64, u64)> {
        let mut out = Vec::new();
        for &g in &self.gammas {
            for &l in &self.lambdas {
                for &lr in &self.learning_rates {
                    for &s in &self.seeds {
                        out.push((g, l, lr, s));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Ok,
    /// Validation subsample covered fewer than two groups; final-epoch
    /// parameters were used.
    Degraded,
    Failed(String),
}

impl TrialStatus {
    pub fn tag(&self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Degraded => "degraded",
            TrialStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub val_wga: Option<f64>,
    pub selected_epoch: Option<usize>,
    pub test: Option<GroupDiagnostics>,
    pub status: TrialStatus,
    pub head: Option<LinearHead>,
}

pub const SELECTION_RULE: &str = "max_val_wga_first";

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trials: Vec<TrialRecord>,
    pub best: Option<usize>,
    pub selection_rule: &'static str,
}

impl SweepResult {
    pub fn best_trial(&self) -> Option<&TrialRecord> {
        self.best.map(|i| &self.trials[i])
    }
}

/// Index of the first eligible trial with the highest validation WGA.
fn select(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        if matches!(t.status, TrialStatus::Failed(_)) {
            continue;
        }
        if let Some(v) = t.val_wga {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn present_groups(ds: &EmbeddingDataset) -> usize {
    ds.group_counts().iter().filter(|&&c| c > 0).count()
}

fn run_trial(
    stage1: &LinearHead,
    data: &Stage2Data,
    spec: &SweepSpec,
    mu: &WeightVector,
    val: &EmbeddingDataset,
    (gamma, lambda, learning_rate, seed): (f64, f64, f64, u64),
) -> TrialRecord {
    let mut record = TrialRecord {
        gamma,
        lambda,
        learning_rate,
        seed,
        val_wga: None,
        selected_epoch: None,
        test: None,
        status: TrialStatus::Ok,
        head: None,
    };
    let full_validation = spec.validation_fraction >= 1.0;
    let degraded = val.is_empty() || present_groups(val) < 2;
    let config = TrainConfig {
        learning_rate,
        lambda,
        // without the full validation set, early stopping tends to stop too soon
        early_stopping: spec.train.early_stopping && full_validation && !degraded,
        ..spec.train
    };
    let outcome = retrain(stage1, data, mu, Some(val), &config)
        .and_then(|run| Ok((data.evaluate_test(&run.head)?, run)));
    match outcome {
        Ok((test, run)) => {
            record.val_wga = run.val_wga;
            record.selected_epoch = Some(run.selected_epoch);
            record.test = Some(test);
            record.head = Some(run.head);
            if degraded {
                record.status = TrialStatus::Degraded;
            }
        }
        Err(e) => record.status = TrialStatus::Failed(e.to_string()),
    }
    record
}

/// Runs every grid point × seed and selects by validation WGA. Test
/// diagnostics are recorded but never consulted for selection. `jobs`
/// bounds the number of worker threads; results are merged by trial index.
pub fn run_sweep(
    dataset: &EmbeddingDataset,
    stage1: &LinearHead,
    spec: &SweepSpec,
    jobs: usize,
) -> Result<SweepResult> {
    spec.validate()?;
    let data = Stage2Data::new(dataset, stage1)?;

    let weights: Vec<WeightVector> = spec
        .gammas
        .iter()
        .map(|&g| {
            data.weights(&WeightScheme {
                kind: spec.scheme,
                gamma: g,
                upweight_lambda: spec.upweight_lambda,
            })
        })
        .collect::<Result<_>>()?;
    // seeds drive the validation subsample; an empty draw leaves the trial degraded
    let vals: Vec<(u64, EmbeddingDataset)> = spec
        .seeds
        .iter()
        .map(|&s| {
            if spec.validation_fraction >= 1.0 {
                return Ok((s, data.val.clone()));
            }
            let tagged = data
                .val
                .clone()
                .with_split_tags(vec![Split::Val; data.val.len()])?;
            let sub = subsample_validation(&tagged, spec.validation_fraction, &mut Rng::new(s))
                .unwrap_or_else(|_| data.val.subset(&[]));
            Ok((s, sub))
        })
        .collect::<Result<_>>()?;

    let grid = spec.grid();
    let per_gamma = grid.len() / spec.gammas.len();
    let run = |(i, point): (usize, &(f64, f64, f64, u64))| {
        let mu = &weights[i / per_gamma];
        let val = &vals.iter().find(|(s, _)| *s == point.3).unwrap().1;
        run_trial(stage1, &data, spec, mu, val, *point)
    };

    let trials: Vec<TrialRecord> = if jobs <= 1 {
        grid.iter().enumerate().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| AfrError::invalid(format!("thread pool: {e}")))?;
        pool.install(|| grid.par_iter().enumerate().map(run).collect())
    };
    Ok(SweepResult {
        best: select(&trials),
        trials,
        selection_rule: SELECTION_RULE,
    })
}

pub const SWEEP_CSV_COLUMNS: [&str; 9] = [
    "gamma",
    "lambda",
    "learning_rate",
    "seed",
    "val_wga",
    "test_wga",
    "test_mean_acc",
    "selected_epoch",
    "status",
];

fn opt_num<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn write_sweep_csv<W: std::io::Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_COLUMNS)?;
    for t in &result.trials {
        w.write_record([
            t.gamma.to_string(),
            t.lambda.to_string(),
            t.learning_rate.to_string(),
            t.seed.to_string(),
            opt_num(t.val_wga),
            opt_num(t.test.as_ref().map(|d| d.worst_group_accuracy)),
            opt_num(t.test.as_ref().map(|d| d.mean_accuracy)),
            opt_num(t.selected_epoch),
            t.status.tag().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyPoint {
    pub fraction: f64,
    pub mean_test_wga: f64,
    pub std_test_wga: f64,
    /// Selected test WGA for each subsample seed.
    pub runs: Vec<f64>,
}

pub const EFFICIENCY_CSV_COLUMNS: [&str; 4] =
    ["fraction", "mean_test_wga", "std_test_wga", "n_runs"];

/// For each fraction and subsample seed, reruns the sweep with only the
/// subsampled validation rows available for selection and records the
/// selected trial's test WGA.
pub fn label_efficiency_curve(
    dataset: &EmbeddingDataset,
    stage1: &LinearHead,
    spec: &SweepSpec,
    fractions: &[f64],
    subsample_seeds: &[u64],
    jobs: usize,
) -> Result<Vec<EfficiencyPoint>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(AfrError::invalid("fractions must lie in (0, 1]"));
    }
    if subsample_seeds.is_empty() {
        return Err(AfrError::invalid("need at least one subsample seed"));
    }
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut runs = Vec::with_capacity(subsample_seeds.len());
        for &seed in subsample_seeds {
            let sub = SweepSpec {
                validation_fraction: fraction,
                seeds: vec![seed],
                ..spec.clone()
            };
            let result = run_sweep(dataset, stage1, &sub, jobs)?;
            let wga = result
                .best_trial()
                .and_then(|t| t.test.as_ref())
                .map(|d| d.worst_group_accuracy)
                .ok_or_else(|| {
                    AfrError::invalid(format!("every trial failed at fraction {fraction}"))
                })?;
            runs.push(wga);
        }
        let (mean, std) = mean_and_std(&runs);
        points.push(EfficiencyPoint {
            fraction,
            mean_test_wga: mean,
            std_test_wga: std,
            runs,
        });
    }
    Ok(points)
}

pub fn write_efficiency_csv<W: std::io::Write>(points: &[EfficiencyPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EFFICIENCY_CSV_COLUMNS)?;
    for p in points {
        w.write_record([
            p.fraction.to_string(),
            p.mean_test_wga.to_string(),
            p.std_test_wga.to_string(),
            p.runs.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Group-aggregated RW weights and effective sample size at one γ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightProfile {
    pub gamma: f64,
    pub aggregated: Vec<f64>,
    pub n_eff: f64,
}

pub fn weight_profile(
    data: &Stage2Data,
    scheme: SchemeKind,
    gammas: &[f64],
) -> Result<Vec<WeightProfile>> {
    let groups = data
        .rw
        .groups()
        .ok_or_else(|| AfrError::invalid("RW split has no group labels"))?;
    gammas
        .iter()
        .map(|&gamma| {
            let mu = data.weights(&WeightScheme::new(scheme, gamma))?;
            Ok(WeightProfile {
                gamma,
                aggregated: group_aggregated_weights(&mu, groups, data.rw.num_groups()),
                n_eff: effective_sample_size(&mu),
            })
        })
        .collect()
}
