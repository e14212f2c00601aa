//! CPU engine for CAM++ speaker embeddings.
//!
//! The crate covers the whole pipeline: tensors with reverse-mode
//! differentiation, log-mel filterbank features, the CAM++ network and its
//! D-TDNN relatives, toy-scale training, complexity analysis and the
//! verification back-end (cosine scoring, EER, MinDCF).

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod scoring;
pub mod tensor;
pub mod training;
pub mod tensor_file;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, Preset};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
