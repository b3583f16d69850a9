//! Multiplexed residual networks with cellular-automaton generated pointwise
//! weights, balanced ternary quantization and bit-exact integer inference.

pub mod blocks;
pub mod ca;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use blocks::{size_report, Activation, CflogConfig, ModelConfig, SizeReport};
pub use ca::{generate_kernel, CaConfig, CaKernel};
pub use checkpoint::{export_checkpoint, import_checkpoint};
pub use config::RunConfig;
pub use data::{Augment, Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use infer::{int_forward, predict, Engine, IntModel, IntOutput};
pub use model::{build_model, Model, QuantModel};
pub use tensor::{BnParams, Tensor4};
pub use train::{evaluate, two_stage_train, EpochMetrics, Stage, TrainConfig};
