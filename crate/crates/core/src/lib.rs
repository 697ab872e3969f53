//! Compact GRU-MLP time-series classifiers trained with knowledge distillation,
//! converted to dynamic fixed-point (Q7) form and executed with integer
//! matrix-vector kernels and rational activation approximations.
//!
//! The crate is organised bottom-up:
//!
//! * [`fxp`] – Q7 quantization primitives and the saturating Q7 matrix-vector kernel.
//! * [`activations`] – exact and continued-fraction sigmoid / tanh.
//! * [`model`] – float GRU-MLP, forward pass, complexity accounting, serialization.
//! * [`qmodel`] – dynamically quantized GRU-MLP, input-scale tuning, rodata images.
//! * [`training`] – losses, backpropagation through time and the optimizer loop.
//! * [`distillation`] – teachers, soft-label sets, two-step and self distillation.
//! * [`data`] – datasets, normalization statistics, leave-one-animal-out folds,
//!   synthetic accelerometer generator.
//! * [`metrics`] – confusion matrices and Matthews correlation coefficients.
//! * [`evaluation`] – the cross-validation harness tying everything together.
//! * [`cli`] – the `kdq7` command-line tool.

pub mod activations;
pub mod cli;
pub mod data;
pub mod distillation;
mod error;
pub mod evaluation;
pub mod fxp;
pub mod metrics;
pub mod model;
pub mod opcount;
pub mod qmodel;
mod real;
pub mod rodata;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

pub use data::{Datapoint, Dataset, NormStats};
pub use distillation::{SoftLabelSet, Teacher};
pub use metrics::ConfusionMatrix;
pub use model::{Activation, Architecture, GruMlp, GruMlpModel};
pub use qmodel::{InputScales, QuantizedGruMlpModel};
pub use training::{KdConfig, TrainConfig};
