//! Differentiable algorithm networks: differentiable state estimation and
//! planning modules composed with learned controllers, trained end to end,
//! plus the environments, oracles, and training/evaluation harness around
//! them.

pub mod checks;
pub mod controllers;
pub mod env;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod nn;
pub mod par;
pub mod planner;
pub mod tape;
pub mod tensor;
pub mod oracles;
pub mod training;

pub use error::{DanError, Result};
pub use tensor::Tensor;
