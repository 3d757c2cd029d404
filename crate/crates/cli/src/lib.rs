//! Command-line and HTTP front ends for the fscil pipeline.

pub mod service;
pub mod source;
