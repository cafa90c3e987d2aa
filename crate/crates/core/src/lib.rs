//! Sample-based optimal transport solver.
//!
//! Fits a transport map between two point clouds as a flow of elementary
//! maps, driven by an adversarial test function that is itself a kernel
//! convolution over an evolving particle ensemble. The fitted flow can be
//! replayed on new points, inverted for density estimation via the change
//! of variables formula, and serialized for exact reproduction.

pub mod config;
pub mod density;
pub mod error;
pub mod kernel;
pub mod maps;
pub mod points;
pub mod precondition;
pub mod rng;
pub mod saddle;
pub mod solver;
pub mod testfn;
pub mod transport;

pub use config::{BandwidthPolicy, MapFamily, OptimizerKind, SolverConfig};
pub use error::{Error, Result};
pub use points::{PointMatrix, SampleLabel, SampleSet};
