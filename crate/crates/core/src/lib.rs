//! Operator renewal theory and mixing rates for infinite-measure systems.

pub mod cli;
pub mod error;
pub mod mixing;
pub mod operators;
pub mod par;
pub mod regvar;
pub mod renewal;
pub mod systems;
pub mod tower;

pub use error::{Error, Result};
