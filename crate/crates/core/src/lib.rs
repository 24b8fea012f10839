//! Rate Norm Layer training, ANN-to-SNN conversion and spiking simulation.
//!
//! The crate trains small networks whose activations are clipped by a
//! trainable threshold, converts them to integrate-and-fire networks with
//! soft reset, simulates those networks step by step and measures how fast
//! their firing rates settle.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod conversion;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod rate_norm;
pub mod snn;
pub mod tensor;
pub mod training;

pub use config::ExperimentConfig;
pub use conversion::{
    convert_direct, convert_max_norm, convert_robust_norm, scale_thresholds, ConversionReport,
};
pub use data::Dataset;
pub use diagnostics::{bound_margin, k_value, omega, time_to_accuracy, EnergyReport, KCurve};
pub use error::{Error, Result};
pub use network::{LayerSpec, Network};
pub use rate_norm::{RateNorm, RateNormState};
pub use snn::{run, Coding, Readout, RunOptions, SimulationTrace, SpikingNetwork};
pub use tensor::Tensor;
pub use training::{stage1_train, stage2_train, StageConfig, TrainLog};
