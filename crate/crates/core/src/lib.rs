//! Automatic feature reweighting for group-robust classification.
//!
//! A stage-1 network is trained with plain ERM on one part of the training
//! data. Its predictions on a held-out reweighting split define per-example
//! weights that grow as the predicted probability of the true class falls,
//! which concentrates mass on minority-group examples without using group
//! labels. Only the last linear layer is then retrained on cached embeddings
//! under the weighted cross-entropy plus an anchor penalty toward the
//! stage-1 head.
//!
//! Modules:
//! - [`numerics`]: matrices, stable softmax, gradient clipping, seeded RNG
//! - [`data`]: synthetic generator, splits, embedding files
//! - [`weights`]: weighting schemes, group-aggregated weights, effective sample size
//! - [`head`]: last-layer objectives, gradients, full-batch training, checkpoints
//! - [`mlp`]: stage-1 extractor and the balance learner
//! - [`metrics`]: per-group and worst-group accuracy
//! - [`sweep`]: validation-selected grid search and label-efficiency curves
//! - [`presets`]: the reference synthetic experiment

mod binio;
pub mod data;
pub mod error;
pub mod head;
pub mod metrics;
pub mod mlp;
pub mod numerics;
pub mod presets;
pub mod sweep;
pub mod weights;

pub use data::{EmbeddingDataset, Split, SplitFractions, SyntheticSpec};
pub use error::{AfrError, Result};
pub use head::{LinearHead, ObjectiveKind, TrainConfig, TrainReport};
pub use metrics::GroupDiagnostics;
pub use mlp::{BalanceConfig, ExtractorConfig, Mlp};
pub use numerics::{Matrix, Rng};
pub use sweep::{SweepResult, SweepSpec};
pub use weights::{SchemeKind, WeightScheme, WeightVector};
