//! One function per subcommand. Each writes the resolved config into the
//! run directory first, then its artifacts under fixed file names.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use afr_core::data::{
    generate_split_synthetic, read_embedding_csv, read_embedding_file, split, write_embedding_file,
};
use afr_core::head::{predict_probs, read_head_file, write_head_file};
use afr_core::metrics::GroupDiagnostics;
use afr_core::mlp::{
    cache_embeddings, train_balance_learner, train_erm_extractor, write_mlp_file,
    BalanceLearnerResult,
};
use afr_core::numerics::mean_and_std;
use afr_core::presets::{SPLIT_STREAM, STAGE1_STREAM};
use afr_core::sweep::{
    label_efficiency_curve, retrain, run_sweep, weight_profile, write_efficiency_csv,
    write_sweep_csv, Stage2Data, SweepResult, TrialStatus,
};
use afr_core::weights::{effective_sample_size, group_aggregated_weights};
use afr_core::{EmbeddingDataset, LinearHead, Rng, SchemeKind, Split};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.resolved";
pub const DATASET_FILE: &str = "dataset.afre";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const STAGE1_MODEL_FILE: &str = "stage1.afrm";
pub const STAGE1_HEAD_FILE: &str = "stage1_head.afrh";
pub const STAGE1_DIAGNOSTICS_FILE: &str = "stage1_diagnostics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.afre";
pub const AFR_HEAD_FILE: &str = "head_afr.afrh";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";
pub const SWEEP_HEAD_FILE: &str = "head_sweep_best.afrh";
pub const LABEL_EFFICIENCY_FILE: &str = "label_efficiency.csv";
pub const BALANCE_MODEL_FILE: &str = "balance_learner.afrm";
pub const BALANCE_TRAJECTORY_FILE: &str = "balance_learner_trajectory.csv";
pub const PLOTS_DIR: &str = "plots";
pub const GAMMA_WEIGHT_FILE: &str = "gamma_vs_group_weight.csv";
pub const GAMMA_WGA_FILE: &str = "gamma_vs_wga_neff.csv";

/// Validated configuration plus the run directory and worker count.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Run {
    pub fn new(config: RunConfig, out: PathBuf, jobs: usize) -> Result<Self, CliError> {
        config.validate()?;
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        Ok(Self { config, out, jobs })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Creates the run directory and echoes the resolved config into it.
    fn begin(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.path(CONFIG_FILE), self.config.to_toml())?;
        Ok(())
    }

    fn require(&self, names: &[&str]) -> Result<(), CliError> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !self.path(n).is_file())
            .map(|n| n.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::MissingArtifacts {
                dir: self.out.clone(),
                missing,
            })
        }
    }

    fn input_dataset(&self) -> Result<EmbeddingDataset, CliError> {
        let path = match &self.config.paths.dataset {
            Some(p) => p.clone(),
            None => {
                self.require(&[DATASET_FILE])?;
                self.path(DATASET_FILE)
            }
        };
        let ds = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
        {
            read_embedding_csv(&path)?
        } else {
            read_embedding_file(&path)?
        };
        if ds.split_tags().is_some() {
            Ok(ds)
        } else {
            Ok(split(
                &ds,
                &self.config.split_fractions(),
                &mut Rng::new(self.config.seed).derive(SPLIT_STREAM),
            )?)
        }
    }

    /// Cached embeddings and the anchored stage-1 head.
    fn stage1_artifacts(&self) -> Result<(EmbeddingDataset, LinearHead), CliError> {
        self.require(&[EMBEDDINGS_FILE, STAGE1_HEAD_FILE])?;
        Ok((
            read_embedding_file(self.path(EMBEDDINGS_FILE))?,
            read_head_file(self.path(STAGE1_HEAD_FILE))?,
        ))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Provenance {
    tool: String,
    seed: u64,
    source: String,
    rows: usize,
    dims: usize,
    num_classes: usize,
    num_groups: usize,
    group_counts: Vec<usize>,
    split_rows: BTreeMap<String, usize>,
}

pub fn generate(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let cfg = &run.config;
    let ds = generate_split_synthetic(
        &cfg.synthetic_spec(),
        &cfg.split_fractions(),
        cfg.eval_group_proportions(),
        &mut Rng::new(cfg.seed).derive(SPLIT_STREAM),
    )?;
    write_embedding_file(&ds, run.path(DATASET_FILE))?;
    let split_rows = [Split::Erm, Split::Rw, Split::Val, Split::Test]
        .into_iter()
        .map(|s| (s.name().to_string(), ds.indices_of(s).len()))
        .collect();
    write_json(
        &run.path(PROVENANCE_FILE),
        &Provenance {
            tool: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            seed: cfg.seed,
            source: "synthetic".into(),
            rows: ds.len(),
            dims: ds.dim(),
            num_classes: ds.num_classes(),
            num_groups: ds.num_groups(),
            group_counts: ds.group_counts(),
            split_rows,
        },
    )?;
    println!(
        "wrote {} rows to {}",
        ds.len(),
        run.path(DATASET_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Stage1Diagnostics {
    train_accuracy: f64,
    final_loss: f64,
    layer_sizes: Vec<usize>,
    test: GroupDiagnostics,
}

fn test_diagnostics(
    ds: &EmbeddingDataset,
    head: &LinearHead,
) -> Result<GroupDiagnostics, CliError> {
    Ok(Stage2Data::new(ds, head)?.evaluate_test(head)?)
}

pub fn train_base(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let ds = run.input_dataset()?;
    if ds.groups().is_none() {
        return Err(CliError::Data("dataset has no group labels".into()));
    }
    let mut rng = Rng::new(run.config.seed).derive(STAGE1_STREAM);
    let model = train_erm_extractor(&ds.part(Split::Erm), &run.config.extractor(), &mut rng)?;
    let embeddings = cache_embeddings(&model.extractor, &ds)?;
    write_mlp_file(&model.extractor, run.path(STAGE1_MODEL_FILE))?;
    write_head_file(&model.head, run.path(STAGE1_HEAD_FILE))?;
    write_embedding_file(&embeddings, run.path(EMBEDDINGS_FILE))?;
    let test = test_diagnostics(&embeddings, &model.head)?;
    println!(
        "stage 1: train accuracy {:.4}, test WGA {:.4}, test mean accuracy {:.4}",
        model.train_accuracy, test.worst_group_accuracy, test.mean_accuracy
    );
    write_json(
        &run.path(STAGE1_DIAGNOSTICS_FILE),
        &Stage1Diagnostics {
            train_accuracy: model.train_accuracy,
            final_loss: model.final_loss,
            layer_sizes: model.extractor.layer_sizes(),
            test,
        },
    )
}

#[derive(Serialize)]
struct ReweightDiagnostics {
    scheme: SchemeKind,
    gamma: f64,
    upweight_lambda: f64,
    lambda: f64,
    selected_epoch: usize,
    val_wga: Option<f64>,
    rw_rows: usize,
    n_eff: f64,
    group_aggregated_weights: Vec<f64>,
    distance_to_anchor: f64,
    stage1_test: GroupDiagnostics,
    test: GroupDiagnostics,
}

pub fn reweight(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let (embeddings, stage1) = run.stage1_artifacts()?;
    let data = Stage2Data::new(&embeddings, &stage1)?;
    let scheme = run.config.weight_scheme();
    let mu = data.weights(&scheme)?;
    let groups = data
        .rw
        .groups()
        .ok_or_else(|| CliError::Data("RW split has no group labels".into()))?;
    let result = retrain(
        &stage1,
        &data,
        &mu,
        Some(&data.val),
        &run.config.train_config(),
    )?;
    write_head_file(&result.head, run.path(AFR_HEAD_FILE))?;

    let mut w = csv::Writer::from_path(run.path(WEIGHTS_FILE))?;
    w.write_record(["row", "label", "group", "p_hat", "weight"])?;
    for (i, &m) in mu.as_slice().iter().enumerate() {
        w.write_record([
            i.to_string(),
            data.rw.labels()[i].to_string(),
            groups[i].to_string(),
            data.p_hat[i].to_string(),
            m.to_string(),
        ])?;
    }
    w.flush()?;

    let test = data.evaluate_test(&result.head)?;
    println!(
        "reweighted ({} γ={}): selected epoch {}, test WGA {:.4}, test mean accuracy {:.4}",
        scheme.kind.name(),
        scheme.gamma,
        result.selected_epoch,
        test.worst_group_accuracy,
        test.mean_accuracy
    );
    write_json(
        &run.path(DIAGNOSTICS_FILE),
        &ReweightDiagnostics {
            scheme: scheme.kind,
            gamma: scheme.gamma,
            upweight_lambda: scheme.upweight_lambda,
            lambda: run.config.train.lambda,
            selected_epoch: result.selected_epoch,
            val_wga: result.val_wga,
            rw_rows: data.rw.len(),
            n_eff: effective_sample_size(&mu),
            group_aggregated_weights: group_aggregated_weights(&mu, groups, data.rw.num_groups()),
            distance_to_anchor: result.head.distance_to_anchor(),
            stage1_test: data.evaluate_test(&stage1)?,
            test,
        },
    )
}

#[derive(Serialize)]
struct SweepSummary {
    selection_rule: &'static str,
    trials: usize,
    failed: usize,
    degraded: usize,
    best: Option<BestTrial>,
}

#[derive(Serialize)]
struct BestTrial {
    gamma: f64,
    lambda: f64,
    learning_rate: f64,
    seed: u64,
    val_wga: Option<f64>,
    selected_epoch: Option<usize>,
    test: Option<GroupDiagnostics>,
}

fn sweep_summary(result: &SweepResult) -> SweepSummary {
    let count = |f: fn(&TrialStatus) -> bool| result.trials.iter().filter(|t| f(&t.status)).count();
    SweepSummary {
        selection_rule: result.selection_rule,
        trials: result.trials.len(),
        failed: count(|s| matches!(s, TrialStatus::Failed(_))),
        degraded: count(|s| matches!(s, TrialStatus::Degraded)),
        best: result.best_trial().map(|t| BestTrial {
            gamma: t.gamma,
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            seed: t.seed,
            val_wga: t.val_wga,
            selected_epoch: t.selected_epoch,
            test: t.test.clone(),
        }),
    }
}

pub fn sweep(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let (embeddings, stage1) = run.stage1_artifacts()?;
    let result = run_sweep(&embeddings, &stage1, &run.config.sweep_spec(), run.jobs)?;
    write_sweep_csv(&result, fs::File::create(run.path(SWEEP_FILE))?)?;
    if let Some(best) = result.best_trial() {
        if let Some(head) = &best.head {
            write_head_file(head, run.path(SWEEP_HEAD_FILE))?;
        }
        println!(
            "best of {} trials: γ={} λ={} lr={} val WGA {:.4} test WGA {:.4}",
            result.trials.len(),
            best.gamma,
            best.lambda,
            best.learning_rate,
            best.val_wga.unwrap_or(f64::NAN),
            best.test
                .as_ref()
                .map_or(f64::NAN, |d| d.worst_group_accuracy)
        );
    }
    write_json(&run.path(SWEEP_SUMMARY_FILE), &sweep_summary(&result))
}

pub fn label_efficiency(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let (embeddings, stage1) = run.stage1_artifacts()?;
    let le = &run.config.label_efficiency;
    let points = label_efficiency_curve(
        &embeddings,
        &stage1,
        &run.config.sweep_spec(),
        &le.fractions,
        &le.seeds,
        run.jobs,
    )?;
    write_efficiency_csv(&points, fs::File::create(run.path(LABEL_EFFICIENCY_FILE))?)?;
    for p in &points {
        println!(
            "fraction {}: test WGA {:.4} ± {:.4} over {} runs",
            p.fraction,
            p.mean_test_wga,
            p.std_test_wga,
            p.runs.len()
        );
    }
    Ok(())
}

fn fit_balance_learner(
    run: &Run,
    embeddings: &EmbeddingDataset,
    stage1: &LinearHead,
) -> Result<BalanceLearnerResult, CliError> {
    let rw = embeddings.part(Split::Rw);
    let groups = rw
        .groups()
        .ok_or_else(|| CliError::Data("RW split has no group labels".into()))?;
    let probs = predict_probs(stage1, rw.features())?;
    Ok(train_balance_learner(
        &probs,
        rw.labels(),
        groups,
        rw.num_groups(),
        &run.config.balance_config(),
    )?)
}

fn write_trajectory(path: &Path, trajectory: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "group", "aggregated_weight"])?;
    for (step, agg) in trajectory.iter().enumerate() {
        for (g, a) in agg.iter().enumerate() {
            w.write_record([step.to_string(), g.to_string(), a.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn balance_learner(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let (embeddings, stage1) = run.stage1_artifacts()?;
    let result = fit_balance_learner(run, &embeddings, &stage1)?;
    write_mlp_file(&result.network, run.path(BALANCE_MODEL_FILE))?;
    write_trajectory(&run.path(BALANCE_TRAJECTORY_FILE), &result.trajectory)?;
    if let (Some(agg), Some(loss)) = (result.trajectory.last(), result.losses.last()) {
        println!("balance learner: final loss {loss:.6}, aggregated weights {agg:?}");
    }
    Ok(())
}

/// Sweep rows needed for the γ vs test-WGA curve.
struct SweepRow {
    gamma: f64,
    seed: u64,
    val_wga: Option<f64>,
    test_wga: Option<f64>,
    failed: bool,
}

fn sweep_rows_from_result(result: &SweepResult) -> Vec<SweepRow> {
    result
        .trials
        .iter()
        .map(|t| SweepRow {
            gamma: t.gamma,
            seed: t.seed,
            val_wga: t.val_wga,
            test_wga: t.test.as_ref().map(|d| d.worst_group_accuracy),
            failed: matches!(t.status, TrialStatus::Failed(_)),
        })
        .collect()
}

fn sweep_rows_from_csv(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    let bad = |what: &str| CliError::Data(format!("{}: unreadable {what}", path.display()));
    let opt = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("number"))
        }
    };
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(name))
    };
    let (g, s, v, t, st) = (
        col("gamma")?,
        col("seed")?,
        col("val_wga")?,
        col("test_wga")?,
        col("status")?,
    );
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(SweepRow {
            gamma: rec[g].parse().map_err(|_| bad("gamma"))?,
            seed: rec[s].parse().map_err(|_| bad("seed"))?,
            val_wga: opt(&rec[v])?,
            test_wga: opt(&rec[t])?,
            failed: &rec[st] == "failed",
        });
    }
    Ok(rows)
}

/// Per γ: for each seed the trial with the best validation WGA (first on
/// ties), then the mean and population standard deviation of their test WGA.
fn wga_by_gamma(rows: &[SweepRow]) -> Vec<(f64, Option<(f64, f64)>)> {
    let mut gammas: Vec<f64> = Vec::new();
    for r in rows {
        if !gammas.contains(&r.gamma) {
            gammas.push(r.gamma);
        }
    }
    gammas
        .into_iter()
        .map(|gamma| {
            let mut seeds: Vec<u64> = Vec::new();
            for r in rows.iter().filter(|r| r.gamma == gamma) {
                if !seeds.contains(&r.seed) {
                    seeds.push(r.seed);
                }
            }
            let picks: Vec<f64> = seeds
                .iter()
                .filter_map(|&seed| {
                    let mut best: Option<&SweepRow> = None;
                    for r in rows
                        .iter()
                        .filter(|r| r.gamma == gamma && r.seed == seed && !r.failed)
                    {
                        if let Some(v) = r.val_wga {
                            if best.is_none_or(|b| v > b.val_wga.unwrap_or(f64::NEG_INFINITY)) {
                                best = Some(r);
                            }
                        }
                    }
                    best.and_then(|b| b.test_wga)
                })
                .collect();
            (gamma, (!picks.is_empty()).then(|| mean_and_std(&picks)))
        })
        .collect()
}

/// Plot-data tables. Reuses sweep and balance-learner artifacts when they
/// exist and recomputes them from the stage-1 artifacts otherwise.
pub fn plots(run: &Run) -> Result<(), CliError> {
    run.begin()?;
    let (embeddings, stage1) = run.stage1_artifacts()?;
    let dir = run.path(PLOTS_DIR);
    fs::create_dir_all(&dir)?;
    let data = Stage2Data::new(&embeddings, &stage1)?;
    let kind = run.config.scheme.kind;

    let mut w = csv::Writer::from_path(dir.join(GAMMA_WEIGHT_FILE))?;
    w.write_record(["gamma", "group", "aggregated_weight"])?;
    for p in weight_profile(&data, kind, &run.config.plots.gammas)? {
        for (g, a) in p.aggregated.iter().enumerate() {
            w.write_record([p.gamma.to_string(), g.to_string(), a.to_string()])?;
        }
    }
    w.flush()?;

    let rows = if run.path(SWEEP_FILE).is_file() {
        sweep_rows_from_csv(&run.path(SWEEP_FILE))?
    } else {
        sweep_rows_from_result(&run_sweep(
            &embeddings,
            &stage1,
            &run.config.sweep_spec(),
            run.jobs,
        )?)
    };
    let curve = wga_by_gamma(&rows);
    let gammas: Vec<f64> = curve.iter().map(|(g, _)| *g).collect();
    let profiles = weight_profile(&data, kind, &gammas)?;
    let mut w = csv::Writer::from_path(dir.join(GAMMA_WGA_FILE))?;
    w.write_record(["gamma", "test_wga_mean", "test_wga_std", "n_eff"])?;
    for ((gamma, stats), profile) in curve.iter().zip(&profiles) {
        let (mean, std) = stats.map_or((String::new(), String::new()), |(m, s)| {
            (m.to_string(), s.to_string())
        });
        w.write_record([gamma.to_string(), mean, std, profile.n_eff.to_string()])?;
    }
    w.flush()?;

    let trajectory_out = dir.join(BALANCE_TRAJECTORY_FILE);
    if run.path(BALANCE_TRAJECTORY_FILE).is_file() {
        fs::copy(run.path(BALANCE_TRAJECTORY_FILE), &trajectory_out)?;
    } else {
        let result = fit_balance_learner(run, &embeddings, &stage1)?;
        write_trajectory(&trajectory_out, &result.trajectory)?;
    }
    println!("wrote plot data to {}", dir.display());
    Ok(())
}
