//! Conditional imitation-learning driving policy with learned visual
//! attention over a fixed multi-scale grid of image regions, together with
//! the toy driving simulator used to train and evaluate it.

pub mod bench;
pub mod data;
pub mod error;
pub mod policy;
pub mod roi;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
