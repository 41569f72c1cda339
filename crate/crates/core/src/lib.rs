//! Sequence length warmup for small GPT-style models: a reverse-mode
//! autodiff core, the model, Adam, pacing and learning-rate schedules,
//! instability metrics, the low-cost tuner, and the training loop.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
mod gemm;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod tuner;

pub use checkpoint::Checkpoint;
pub use config::{CorpusSpec, ExperimentConfig, Method};
pub use autograd::{Gradients, Graph, Var};
pub use data::{Batch, BatchSampler, CorpusIndex, TokenMatrix};
pub use error::{Error, Result};
pub use metrics::{Correlation, InstabilitySummary, LossRatioTracker, MetricRecord};
pub use model::{ModelConfig, Parameters};
pub use optim::{AdamConfig, AdamState, VarianceStats};
pub use schedule::{BszWarmup, LrSchedule, MixedSeqlen, PacingFunction, PacingShape, ScheduleUnit};
pub use tensor::Tensor;
pub use train::{Manifest, RunStatus, RunSummary, TrainState, Trainer};
pub use tuner::{FluctuationCriterion, ProbeOutcome, TunePlan, TuneResult};
