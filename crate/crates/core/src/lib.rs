//! Visibility boosting and logit-constrained self-training for segmentation
//! under fog and low light, on a small per-pixel model.

pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod lcl;
pub mod model;
pub mod synth;
pub mod trainer;
pub mod vbm;

pub use error::{Error, Result};
pub use image::{Image, LabelMap, ScalarMap, IGNORE_ID};
pub use lcl::{LogitMap, LossConfig, LossKind};
pub use model::ModelParams;
pub use trainer::{Ablation, TrainConfig};
pub use vbm::VbmConfig;
