//! ACU-Net and ACU-SA built on [`crate::nn`], plus the training loop.

pub mod acunet;
pub mod acusa;
pub mod train;

pub use acunet::{acunet_loss, parameter_count, AcuNet, AcuNetConfig, AcuNetLayout, BlockPlan};
pub use acusa::{corrected_examples, stage1_objective, AcuSa, AcuSaConfig, NormConfig, NormLayout};
pub use train::{fit, history_csv, EpochRecord, Examples, FitOutcome, TrainConfig};
