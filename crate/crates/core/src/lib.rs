//! G2GNet: block-structured sparse feedforward networks with dynamic sparse
//! training.
//!
//! The crate builds group-to-group connectivity masks between consecutive
//! layers, trains masked MLPs with hand-written backpropagation and Adam, and
//! periodically rewires the masks during training using magnitude, random, or
//! activation-correlation criteria.

pub mod error;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
