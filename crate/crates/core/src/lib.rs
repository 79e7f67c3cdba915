//! Conditional generative radiance fields with set-valued latents.
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
mod error;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod run;
pub mod scenefn;
pub mod training;
pub use error::{Error, Result};
