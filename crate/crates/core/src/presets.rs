//! The reference synthetic experiment: Waterbirds-like group proportions
//! with a spurious attribute that is easier to read than the core one.

use crate::data::{
    generate_split_synthetic, EmbeddingDataset, Split, SplitFractions, SyntheticSpec,
};
use crate::error::Result;
use crate::head::{ObjectiveKind, TrainConfig};
use crate::mlp::{train_erm_extractor, ExtractorConfig, Stage1Model};
use crate::numerics::Rng;
use crate::sweep::SweepSpec;
use crate::weights::SchemeKind;

/// Landbird/land, landbird/water, waterbird/land, waterbird/water.
pub const WATERBIRDS_PROPORTIONS: [f64; 4] = [0.73, 0.04, 0.01, 0.22];

pub const REFERENCE_SEED: u64 = 10;

/// Streams derived from the run seed for splitting and for stage 1.
pub const SPLIT_STREAM: u64 = 1;
pub const STAGE1_STREAM: u64 = 2;

pub fn reference_synthetic() -> SyntheticSpec {
    SyntheticSpec {
        n_total: 5000,
        dims: 4,
        group_proportions: WATERBIRDS_PROPORTIONS.to_vec(),
        core_separation: 1.5,
        spurious_separation: 3.0,
        noise_std: 1.0,
        seed: REFERENCE_SEED,
    }
}

pub fn reference_split() -> SplitFractions {
    SplitFractions {
        erm_fraction: 0.8,
        val_fraction: 0.1,
        test_fraction: 0.2,
        stratify: true,
    }
}

pub fn reference_extractor() -> ExtractorConfig {
    ExtractorConfig {
        hidden: vec![128, 128],
        ..ExtractorConfig::default()
    }
}

pub fn reference_train() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::Afr,
        learning_rate: 0.1,
        max_epochs: 1000,
        ..TrainConfig::default()
    }
}

pub fn reference_sweep() -> SweepSpec {
    SweepSpec {
        gammas: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
        lambdas: vec![0.0, 0.01, 0.1],
        learning_rates: vec![0.1],
        scheme: SchemeKind::AfrExponential,
        upweight_lambda: 1.0,
        train: reference_train(),
        validation_fraction: 1.0,
        seeds: vec![0],
    }
}

/// γ used by a single reweighting run when none is configured.
pub const REFERENCE_GAMMA: f64 = 4.0;

/// Validation fractions for the label-efficiency curve.
pub const LABEL_EFFICIENCY_FRACTIONS: [f64; 3] = [0.05, 0.25, 1.0];

/// Group mix of the validation and test population.
pub const REFERENCE_EVAL_PROPORTIONS: [f64; 4] = [0.25; 4];

/// The reference dataset with all four split tags.
pub fn reference_dataset() -> Result<EmbeddingDataset> {
    let spec = reference_synthetic();
    generate_split_synthetic(
        &spec,
        &reference_split(),
        Some(&REFERENCE_EVAL_PROPORTIONS),
        &mut Rng::new(spec.seed).derive(SPLIT_STREAM),
    )
}

/// Stage-1 ERM network trained on the ERM split of `dataset`.
pub fn reference_stage1(dataset: &EmbeddingDataset) -> Result<Stage1Model> {
    train_erm_extractor(
        &dataset.part(Split::Erm),
        &reference_extractor(),
        &mut Rng::new(REFERENCE_SEED).derive(STAGE1_STREAM),
    )
}
