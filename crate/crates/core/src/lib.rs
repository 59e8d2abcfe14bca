//! Generalized Langevin equations with state-dependent coefficients.
//!
//! Memory kernels and colored noise are realized as finite-dimensional
//! Ornstein–Uhlenbeck systems ([`realization`]), assembled into a Markovian
//! SDE ([`model`]), integrated ([`simulate`]) and reduced to homogenized
//! limit equations ([`homogenize`]) whose behavior is checked statistically
//! ([`analysis`]).

pub mod analysis;
pub mod error;
pub mod expr;
pub mod homogenize;
pub mod matops;
pub mod model;
pub mod quad;
pub mod realization;
pub mod serde_matrix;
pub mod simulate;

pub use analysis::{ConvergenceReport, MSDCurve};
pub use error::{ErrorCategory, GleError, Result};
pub use homogenize::{LimitSystem, Provenance};
pub use matops::{Complex64, Matrix, Spectrum, Vector};
pub use model::{CoefficientField, GLEModel};
pub use simulate::{SdeSystem, SimConfig};
