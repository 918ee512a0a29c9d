pub mod benchmarks;
pub mod bspline;
pub mod collocation;
pub mod config;
pub mod error;
pub mod image;
pub mod io;
pub mod raytrace;
pub mod reflector;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
