//! Dual-attention grouped-convolution classifier for paired spine MRI slices.
//!
//! The crate is layered bottom-up: [`tensor`] (autodiff), [`layers`],
//! [`attention`], [`model`], [`optim`], and the data side: [`image`],
//! [`augment`], [`dataset`], [`metrics`]. [`train`] and [`checkpoint`] tie
//! them into the command-line workflow.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
