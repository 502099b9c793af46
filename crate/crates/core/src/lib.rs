//! Boosted embedding ensembles for deep metric learning.
//!
//! One linear embedding layer is split into groups; each group is a weak
//! learner trained by online gradient boosting on a pair or triplet loss, and
//! an auxiliary diversity loss decorrelates the groups.

pub mod boosting;
mod codec;
pub mod data;
pub mod diversity;
pub mod ensemble;
pub mod gradcheck;
pub mod eval;
pub mod error;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use data::{FeatureSet, SplitMode, SynthSpec};
pub use boosting::{MetricOptions, MinedItems, Objective, PairItem, TripletItem};
pub use diversity::{AdversarialOptions, DiversityKind, RegressorBank, SimNormalizer};
pub use ensemble::{BoostSchedule, EnsembleModel, GroupPartition, PartitionSource, TestEmbedding};
pub use eval::{EvalOptions, EvalReport};
pub use error::{Error, Result};
pub use losses::{LossKind, LossSpec, PairLabel, WeightConvention};
pub use optim::{OptimConfig, OptimKind, Optimizer};
pub use tensor::{Matrix, Rng, Vector};
pub use trainer::{Checkpoint, InitConfig, InitReport, MetricsRow, TrainConfig, TrainState};
