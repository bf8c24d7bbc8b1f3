//! Anchor-context action detection on synthetic feature-grid videos.
//!
//! The crate trains a small anchor-context detector (RoI pooling plus
//! spatial/temporal attention toward an instrument anchor), refines its
//! class distributions with a prior-conditioned denoising diffusion model,
//! and reports frame-level mAP together with interval-width confidence.
//!
//! Core math (tensors, the autodiff graph, diffusion schedules) is generic
//! over the scalar type; the aliases below pin the f64 instantiations used
//! by the pipeline.

pub mod acd;
pub mod ccd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod testing;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense f64 tensor, the default carrier for features and parameters.
pub type Tensor = tensor::Tensor<f64>;
/// f32 instantiation, matching the on-disk feature precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 autodiff graph.
pub type Graph = graph::Graph<f64>;
/// f64 parameter store.
pub type ParamStore = graph::ParamStore<f64>;
/// f64 diffusion schedule.
pub type DiffusionSchedule = ccd::schedule::Schedule<f64>;
