//! AAM-softmax loss, SGD, learning-rate schedule and a toy-scale fit loop.

mod aam;
mod optim;
mod toy;

pub use aam::{aam_logits, aam_softmax_loss, aam_softmax_loss_value, cosine_predictions, AamConfig};
pub use optim::{clip_grad_norm, lr_schedule, ScheduleConfig, Sgd};
pub use toy::{
    synthetic_dataset, synthetic_speakers, toy_fit, write_synthetic_dataset, FitReport, LabeledFeatures, LrPolicy,
    ToyDataset, ToyFitConfig,
};
