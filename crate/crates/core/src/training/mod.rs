//! Pretraining and LoRA fine-tuning loops.

mod adam;
mod schedule;
mod strategy;
mod trainer;

pub use adam::Adam;
pub use schedule::{make_schedule, Schedule};
pub use strategy::{select_inputs, Domain};
pub use trainer::{
    read_metrics, record_step_loss, run_experiment, train_step, write_metrics, BatchSampler, StepLoss, StepMetrics, TrainOutcome,
    TrainPlan, TrainState,
};

use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train plan: {0}")]
    Plan(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("loss became non-finite ({value}) at step {step}; last good parameters have digest {last_good}")]
    NonFiniteLoss { step: usize, value: f64, last_good: String },
    #[error("fine-tuning changed the frozen base weights")]
    BaseMutated,
    #[error("fine-tuning needs a LoRA config when the model has no adapters")]
    MissingLora,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("metrics log: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
