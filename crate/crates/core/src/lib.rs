//! Deep perceptual autoencoders for image anomaly detection.

pub mod autoencoder;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod hparam;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use autoencoder::{blend_input, Autoencoder, BlendState, ModelConfig};
pub use error::{Error, Result};
pub use features::{FeatureExtractor, FeatureStats, FixedRandomSpec, StatsSet};
pub use loss::{LossConfig, LossKind, LossValue};
pub use tensor::{ImageTensor, Scalar, Tensor};
pub use train::{alpha_at, level_stage, train, train_flat, TrainConfig, TrainReport};
