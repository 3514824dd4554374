//! Sum spectral efficiency of RIS-assisted massive MIMO downlinks under
//! channel aging: MMSE estimation, deterministic-equivalent SINR, RIS phase
//! and power optimization, and a Monte Carlo reference simulator.

pub mod de;
pub mod error;
pub mod estimation;
pub mod fading;
pub mod gradients;
pub mod linalg;
pub mod montecarlo;
pub mod optimizer;
pub mod scenario;

pub use error::{Error, Result};
