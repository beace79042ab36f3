//! Disaggregated data preprocessing for multimodal training.

pub mod constructor;
pub mod dgraph;
pub mod loader;
pub mod error;
pub mod model;
pub mod orchestration;
pub mod place_tree;
pub mod planner;
pub mod rng;
pub mod runtime;
pub mod sim;

pub use error::{Error, Result};
