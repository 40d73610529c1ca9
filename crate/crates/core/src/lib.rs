//! Signed low-rank adapters with a norm-preserving directional projection,
//! together with a small training harness, a property-check suite and a CLI.

pub mod adapter;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
