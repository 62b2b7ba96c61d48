//! Filtering for conditionally Gaussian signal/observation systems with
//! correlated noise: model coefficients, Euler–Maruyama paths, the Riccati
//! filter, finite-difference Zakai solvers, a particle reference filter and
//! a numerical testbed for linear SPDEs in divergence form.

pub mod acceptance;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod scenarios;
pub mod sde;
pub mod testbed;
pub mod zakai;

pub use error::{Error, Result};
pub use model::{MatrixFn, MatrixFnSpec, ModelSpec};
pub use riccati::{FilterEstimate, QuadraticForm, RiccatiState};
pub use sde::PathBundle;
