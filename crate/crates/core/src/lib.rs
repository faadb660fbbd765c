//! Pseudo-ranking collaborative filtering.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod step;
pub mod tensor;
pub mod train;

pub use checkpoint::{CheckpointError, Manifest};
pub use data::{
    Batch, DataError, DatasetStats, IdMap, InputFormat, InteractionStore, ItemIdx, SplitPart, SplitRatios, SplitStore,
    UserIdx,
};
pub use eval::{EvalError, EvalResult, MetricRow};
pub use loss::{ConfidenceProfile, LossError};
pub use model::{ModelError, PrpModel, PseudoRanking, Scorer, Thetas};
pub use oracle::OracleReport;
pub use step::{StepError, StepOptions};
pub use tensor::{AdamConfig, ParamStore, TensorError};
pub use train::{Ablations, FitResult, LossMode, TrainConfig, TrainError};
