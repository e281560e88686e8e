//! Curricular self-supervised pretraining and lung-attention auditing.
//!
//! The crate trains a small residual CNN through a sequence of pretext
//! tasks (rotation prediction, relative patch location, momentum
//! contrast, swapped-assignment clustering), transfers the backbone between
//! steps, fine-tunes a classifier, and audits where the classifier looks:
//! class activation maps are compared against lung masks to give the
//! fraction of attention that falls inside the lungs.
//!
//! A synthetic lung-phantom generator supplies data where the location of
//! the label signal is known by construction.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod classify;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::Grid;
pub use params::{Checkpoint, ParamSet};
pub use tensor::{Scalar, Tensor};
