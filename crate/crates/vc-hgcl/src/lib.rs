//! Commonsense-guided heterogeneous graph contrastive learning for
//! multiple-choice QA, built on a self-contained reverse-mode autodiff
//! tape, plus a synthetic training/evaluation harness.

pub mod crossmodal;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod grn;
pub mod losses;
pub mod pipeline;
pub mod nn;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
