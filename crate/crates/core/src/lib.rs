//! Ordered autoregressive generation over 2D token grids.
//!
//! A small decoder-only transformer is trained on token grids under sampled
//! generation orders. At decode time it scores every unfilled cell in one
//! batched pass against a shared key/value cache and commits the most likely
//! one; the orders it discovers can then be distilled back into training.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub(crate) mod bytes;

pub use error::{Error, Result};
