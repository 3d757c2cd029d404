pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod consensus;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
