//! Method definitions, the multi-branch network, training, the statistical
//! baseline, checkpoints and next-service prediction.

mod checkpoint;
mod network;
mod predict;
mod statistical;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{ForwardCache, MultiBranchLstm};
pub use predict::{inverse_scale_clamped, predict_next_service, predict_windows};
pub use statistical::{fit_statistical, predict_statistical, StatisticalBaseline};
pub use train::{check_aligned, evaluate_loss, gather_batch, train, EpochStats, TrainHistory, TrainSchedule};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureSpec};
use crate::nn::NnError;
use crate::tuning::HyperParams;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("per-stop batches are not aligned on the same target services")]
    MisalignedBatches,
    #[error("no windows to train or evaluate on")]
    EmptyDataset,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error("no ridership records in the statistical window")]
    EmptyWindow,
    #[error("no statistical mean for stop {stop}, service {service}")]
    MissingKey { stop: u32, service: u32 },
    #[error("need {needed} services of history, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("method {0} has no trainable network")]
    NotTrainable(MethodId),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    A,
    B,
    C,
    D,
    Halyal,
    Statistical,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::A,
        MethodId::B,
        MethodId::C,
        MethodId::D,
        MethodId::Halyal,
        MethodId::Statistical,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodId::A => "A",
            MethodId::B => "B",
            MethodId::C => "C",
            MethodId::D => "D",
            MethodId::Halyal => "Halyal",
            MethodId::Statistical => "Statistical",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(MethodId::A),
            "b" => Ok(MethodId::B),
            "c" => Ok(MethodId::C),
            "d" => Ok(MethodId::D),
            "halyal" | "per-stop" | "perstop" => Ok(MethodId::Halyal),
            "statistical" | "stat" => Ok(MethodId::Statistical),
            other => Err(format!("unknown method `{other}` (expected A, B, C, D, Halyal or Statistical)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// One model, one branch per stop, shared head.
    Joint,
    /// One independent single-branch model per stop.
    PerStop,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub id: MethodId,
    pub feature_spec: FeatureSpec,
    pub architecture: Architecture,
}

impl MethodSpec {
    pub fn new(id: MethodId, services_per_day: usize) -> Self {
        let s = services_per_day;
        let (feature_spec, architecture) = match id {
            MethodId::A => (FeatureSpec::ridership_only(s), Architecture::Joint),
            MethodId::B => (FeatureSpec::with_calendar(s), Architecture::Joint),
            MethodId::C => (FeatureSpec::with_weather(s), Architecture::Joint),
            MethodId::D => (FeatureSpec::all(s), Architecture::Joint),
            MethodId::Halyal => (FeatureSpec::ridership_only(s), Architecture::PerStop),
            MethodId::Statistical => (FeatureSpec::ridership_only(s), Architecture::None),
        };
        MethodSpec {
            id,
            feature_spec,
            architecture,
        }
    }
}

/// A network-backed forecaster.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Joint(MultiBranchLstm),
    PerStop(Vec<MultiBranchLstm>),
}

impl TrainedModel {
    pub fn n_stops(&self) -> usize {
        match self {
            TrainedModel::Joint(m) => m.outputs(),
            TrainedModel::PerStop(ms) => ms.len(),
        }
    }
}

/// Seed used for stop `k`'s model inside a per-stop ensemble.
pub fn member_seed(seed: u64, stop_index: usize) -> u64 {
    seed.wrapping_add(stop_index as u64 * 0x9E37_79B9)
}

/// Fresh, deterministically initialized model for a method.
pub fn build_model(spec: &MethodSpec, hp: &HyperParams, n_stops: usize, seed: u64) -> Result<TrainedModel> {
    hp.validate().map_err(ModelError::InvalidHyperParams)?;
    if n_stops == 0 {
        return Err(ModelError::InvalidHyperParams("n_stops must be >= 1".into()));
    }
    let d = spec.feature_spec.dim();
    match spec.architecture {
        Architecture::Joint => Ok(TrainedModel::Joint(MultiBranchLstm::new(
            n_stops,
            d,
            hp.lstm_nodes,
            hp.n_layers,
            n_stops,
            seed,
        )?)),
        Architecture::PerStop => (1..=n_stops)
            .map(|k| MultiBranchLstm::new(1, d, hp.lstm_nodes, hp.n_layers, 1, member_seed(seed, k)))
            .collect::<Result<Vec<_>>>()
            .map(TrainedModel::PerStop),
        Architecture::None => Err(ModelError::NotTrainable(spec.id)),
    }
}
