//! Appliance detection from household electricity consumption series.
//!
//! The crate provides the full pipeline: CSV ingestion, window slicing with
//! calendar channels, a convolutional transformer classifier with its own
//! reverse-mode autodiff, self-supervised pretraining on masked load
//! reconstruction, supervised fine-tuning, and quantile merging of window
//! probabilities into per-series decisions.

pub mod adf;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, GraphMode, NodeId};
pub use kernel::Real;
pub use tensor::Tensor;
