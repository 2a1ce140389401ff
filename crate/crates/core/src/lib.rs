//! Equivariance-aware quantization for SO(3)-equivariant graph networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] - dense row-major tensors and a dynamic reverse-mode
//!   autodiff tape with straight-through rounding support.
//! * [`geometry`] - molecular graphs, neighbor lists, rotations, radial basis
//!   expansion.
//! * [`quant`] - scalar fake quantization, calibration observers, and
//!   magnitude-direction decoupled vector quantization (MDDQ).
//! * [`model`] - a two-branch (scalar / vector) graph transformer with
//!   l2-normalized attention and per-scheme quantizer attachment.
//! * [`train`] - staged quantization-aware training, the local equivariance
//!   error (LEE) metric, and evaluation.
//! * [`infer`] - integer-arithmetic inference (int8/int4 GEMMs with i32
//!   accumulation), conversion from trained checkpoints, cost model, benchmarks.
//! * [`data`] - synthetic Lennard-Jones datasets with analytic labels, XYZ
//!   serialization, dataset splits.
//! * [`checkpoint`] - binary tensor container with quantization metadata.
//!
//! All floating-point state is `f64` internally; checkpoints store `f32`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod quant;
pub mod records;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::{Real, Tensor};
