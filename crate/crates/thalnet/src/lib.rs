//! Modular recurrent networks that exchange features through a shared
//! routing center, together with the tape-based autodiff engine, dataset
//! loaders, training loop, and connectivity analysis used to study them.

pub mod analyze;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod routing;
pub mod train;

pub use error::{Error, Result};
