//! Desk-scale laboratory for knowledge-density-guided block unlearning on
//! a toy transformer: synthetic fact corpus, exact reverse-mode gradients,
//! five baseline unlearning rules, the graft/freeze/revert pipeline, and
//! the retraining-attack evaluation harness.

pub mod error;
pub mod tensor;
pub mod model;
pub mod loss;
pub mod corpus;
pub mod density;
pub mod unlearn;
pub mod train;
pub mod pipeline;
pub mod eval;
pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod svg;
pub mod cli;

pub use error::{Error, Result};
