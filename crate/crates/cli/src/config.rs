//! Run configuration: a TOML file whose sections mirror the library's
//! parameter blocks. Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use afr_core::data::{SplitFractions, SyntheticSpec};
use afr_core::head::{ObjectiveKind, TrainConfig};
use afr_core::mlp::{BalanceConfig, ExtractorConfig};
use afr_core::presets;
use afr_core::sweep::SweepSpec;
use afr_core::weights::{SchemeKind, WeightScheme};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synthetic: SyntheticSection,
    pub split: SplitSection,
    pub stage1: Stage1Section,
    pub scheme: SchemeSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub label_efficiency: LabelEfficiencySection,
    pub balance: BalanceSection,
    pub plots: PlotsSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_total: usize,
    pub dims: usize,
    pub group_proportions: Vec<f64>,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub erm_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub stratify: bool,
    /// Group mix of a separate validation/test population; empty means the
    /// evaluation splits are carved from the training population.
    pub eval_group_proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    pub kind: SchemeKind,
    pub gamma: f64,
    pub upweight_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub objective: ObjectiveKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub lambda: f64,
    pub grad_clip_norm: f64,
    pub early_stopping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub validation_fraction: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelEfficiencySection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotsSection {
    /// γ grid for the group-aggregated weight curves.
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset to train on instead of `<out>/dataset.afre`; `.csv` files are
    /// read as CSV, anything else as the binary embedding format.
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: presets::REFERENCE_SEED,
            synthetic: SyntheticSection::default(),
            split: SplitSection::default(),
            stage1: Stage1Section::default(),
            scheme: SchemeSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            label_efficiency: LabelEfficiencySection::default(),
            balance: BalanceSection::default(),
            plots: PlotsSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = presets::reference_synthetic();
        Self {
            n_total: s.n_total,
            dims: s.dims,
            group_proportions: s.group_proportions,
            core_separation: s.core_separation,
            spurious_separation: s.spurious_separation,
            noise_std: s.noise_std,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = presets::reference_split();
        Self {
            erm_fraction: s.erm_fraction,
            val_fraction: s.val_fraction,
            test_fraction: s.test_fraction,
            stratify: s.stratify,
            eval_group_proportions: presets::REFERENCE_EVAL_PROPORTIONS.to_vec(),
        }
    }
}

impl Default for Stage1Section {
    fn default() -> Self {
        let e = presets::reference_extractor();
        Self {
            hidden: e.hidden,
            epochs: e.epochs,
            learning_rate: e.learning_rate,
            batch_size: e.batch_size,
        }
    }
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            kind: SchemeKind::AfrExponential,
            gamma: presets::REFERENCE_GAMMA,
            upweight_lambda: 1.0,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = presets::reference_train();
        Self {
            objective: t.objective,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            lambda: t.lambda,
            grad_clip_norm: t.grad_clip_norm,
            early_stopping: t.early_stopping,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = presets::reference_sweep();
        Self {
            gammas: s.gammas,
            lambdas: s.lambdas,
            learning_rates: s.learning_rates,
            validation_fraction: s.validation_fraction,
            seeds: s.seeds,
        }
    }
}

impl Default for LabelEfficiencySection {
    fn default() -> Self {
        Self {
            fractions: presets::LABEL_EFFICIENCY_FRACTIONS.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl Default for BalanceSection {
    fn default() -> Self {
        let b = BalanceConfig::default();
        Self {
            hidden: b.hidden,
            steps: b.steps,
            learning_rate: b.learning_rate,
        }
    }
}

impl Default for PlotsSection {
    fn default() -> Self {
        Self {
            gammas: (0..=20).map(|i| i as f64 * 0.5).collect(),
        }
    }
}

fn config_err(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every block against the library's own validation so that bad
    /// values surface as configuration errors before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic_spec()
            .validate()
            .map_err(|e| config_err("synthetic", e))?;
        self.split_fractions()
            .validate()
            .map_err(|e| config_err("split", e))?;
        if let Some(p) = self.eval_group_proportions() {
            let spec = SyntheticSpec {
                group_proportions: p.to_vec(),
                ..self.synthetic_spec()
            };
            spec.validate()
                .map_err(|e| config_err("split.eval_group_proportions", e))?;
        }
        let e = self.extractor();
        if e.hidden.contains(&0) || e.epochs == 0 || e.batch_size == 0 || !(e.learning_rate > 0.0) {
            return Err(config_err(
                "stage1",
                "hidden sizes, epochs and batch_size must be >= 1 and learning_rate > 0",
            ));
        }
        self.weight_scheme()
            .validate()
            .map_err(|e| config_err("scheme", e))?;
        self.train_config()
            .validate()
            .map_err(|e| config_err("train", e))?;
        self.sweep_spec()
            .validate()
            .map_err(|e| config_err("sweep", e))?;
        let le = &self.label_efficiency;
        if le.fractions.is_empty() || le.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err(
                "label_efficiency.fractions",
                "entries must lie in (0, 1]",
            ));
        }
        if le.seeds.is_empty() {
            return Err(config_err("label_efficiency.seeds", "must be nonempty"));
        }
        let b = &self.balance;
        if b.hidden.contains(&0) || !(b.learning_rate > 0.0) {
            return Err(config_err(
                "balance",
                "hidden sizes must be >= 1 and learning_rate > 0",
            ));
        }
        if self.plots.gammas.is_empty() || self.plots.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(config_err(
                "plots.gammas",
                "entries must be >= 0 and the grid nonempty",
            ));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.synthetic;
        SyntheticSpec {
            n_total: s.n_total,
            dims: s.dims,
            group_proportions: s.group_proportions.clone(),
            core_separation: s.core_separation,
            spurious_separation: s.spurious_separation,
            noise_std: s.noise_std,
            seed: self.seed,
        }
    }

    pub fn split_fractions(&self) -> SplitFractions {
        SplitFractions {
            erm_fraction: self.split.erm_fraction,
            val_fraction: self.split.val_fraction,
            test_fraction: self.split.test_fraction,
            stratify: self.split.stratify,
        }
    }

    pub fn eval_group_proportions(&self) -> Option<&[f64]> {
        let p = &self.split.eval_group_proportions;
        (!p.is_empty()).then_some(p.as_slice())
    }

    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig {
            hidden: self.stage1.hidden.clone(),
            epochs: self.stage1.epochs,
            learning_rate: self.stage1.learning_rate,
            batch_size: self.stage1.batch_size,
        }
    }

    pub fn weight_scheme(&self) -> WeightScheme {
        WeightScheme {
            kind: self.scheme.kind,
            gamma: self.scheme.gamma,
            upweight_lambda: self.scheme.upweight_lambda,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            lambda: t.lambda,
            grad_clip_norm: t.grad_clip_norm,
            early_stopping: t.early_stopping,
            objective: t.objective,
        }
    }

    /// Sweep over the configured grid; the train block supplies everything
    /// but the swept learning rate and λ.
    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            gammas: self.sweep.gammas.clone(),
            lambdas: self.sweep.lambdas.clone(),
            learning_rates: self.sweep.learning_rates.clone(),
            scheme: self.scheme.kind,
            upweight_lambda: self.scheme.upweight_lambda,
            train: self.train_config(),
            validation_fraction: self.sweep.validation_fraction,
            seeds: self.sweep.seeds.clone(),
        }
    }

    pub fn balance_config(&self) -> BalanceConfig {
        BalanceConfig {
            hidden: self.balance.hidden.clone(),
            steps: self.balance.steps,
            learning_rate: self.balance.learning_rate,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
        let err = RunConfig::from_toml("sed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn dotted_keys_accepted() {
        let c =
            RunConfig::from_toml("seed = 3\ntrain.lambda = 0.5\nsweep.gammas = [1.0]\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.sweep.gammas, vec![1.0]);
    }

    #[test]
    fn bad_proportions_name_field() {
        let c = RunConfig::from_toml("[synthetic]\ngroup_proportions = [0.5, 0.2, 0.2, 0.2]\n")
            .unwrap();
        let err = c.validate().unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("group_proportions"), "{err}");
    }

    #[test]
    fn default_validates() {
        RunConfig::default().validate().unwrap();
    }
}
