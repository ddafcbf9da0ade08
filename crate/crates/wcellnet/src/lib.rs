//! Training and inference engine for a dual-encoder, single-decoder
//! convolutional network that interpolates intermediate frames between
//! two fluorescence-microscopy images.
//!
//! The crate is self-contained: it ships its own tensor type and
//! reverse-mode autodiff tape ([`graph`]), the network blocks and model
//! ([`layers`], [`model`]), the training losses ([`losses`]), dataset
//! windowing plus a synthetic sequence generator ([`data`]), evaluation
//! metrics and interpolation baselines ([`metrics`]), and the Adam
//! training loop ([`training`]). Slow f64 loop implementations of every
//! numeric operation live in [`reference`] and back the finite
//! difference suite in [`gradcheck`].
//!
//! See the `examples/` directory for runnable entry points per
//! capability, and the `wcellnet` binary for the command line interface.

pub mod data;
pub mod error;
pub mod metrics;
pub mod gradcheck;
pub mod reference;
pub mod features;
pub mod losses;
pub mod layers;
pub mod model;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, NodeId};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
