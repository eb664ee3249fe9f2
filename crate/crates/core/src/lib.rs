//! Quantitative susceptibility mapping by proximal gradient descent with a
//! learned proximal operator.

pub mod baselines;
pub mod cli;
pub mod dipole;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod proxnet;
pub mod solver;
pub mod volume;

pub use error::{QsmError, Result};
pub use volume::{GridSpec, RealVolume};
