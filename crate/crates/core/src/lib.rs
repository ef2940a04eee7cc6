//! Numerical lab for inhomogeneous random graphs: type-density limits,
//! Gaussian fluctuation limits, multigraph simulation, Erdős–Rényi closed
//! forms and minimum-spanning-tree experiments.

pub mod acceptance;
pub mod cli;
pub mod er;
pub mod graph;
pub mod error;
pub mod linalg;
pub mod mbp;
pub mod model;
pub mod mst;
pub mod ode;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use model::ModelSpec;
pub use types::{theta, Kernel, TypeMeasure, TypeSlice, TypeVector};
