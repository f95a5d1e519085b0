pub mod beamforming;
pub mod config;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod geometry;
pub mod linalg;
pub mod manifold;
pub mod signal;
pub use error::{Error, Result};
