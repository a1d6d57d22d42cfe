//! Unsupervised joint affine and diffeomorphic registration of 3D volumes.

pub mod checkpoint;
pub mod error;
pub mod field;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod params;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
