pub mod error;
pub mod geometry;
pub mod mesh;
pub mod metrics;
pub mod optimizer;
pub mod renderer;
pub mod training;
pub mod harness;

pub use error::{Error, Result};
