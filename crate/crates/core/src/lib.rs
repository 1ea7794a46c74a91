//! Estimation, inversion and compensation of quadratic (second-order Volterra)
//! distortions of control pulses, with distortion-aware pulse optimization on a
//! three-level Rydberg atom under Lindblad dynamics.

pub mod control;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod pulse;
pub mod rydberg;
pub mod volterra;

pub use error::{Error, Result};
pub use pulse::{Pulse, TrainingPair};
pub use volterra::{CoefficientVector, GaussianKernelSpec, VolterraKernel};
