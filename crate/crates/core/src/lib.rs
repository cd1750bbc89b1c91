//! Two-dimensional channel tracer transport with an adjoint-based source
//! reconstruction and diagnostics for the information lost along the way.

pub mod adjoint;
pub mod config;
pub mod diagnostics;
pub mod dump;
pub mod error;
pub mod ftle;
pub mod grid;
pub mod harness;
pub mod inversion;
pub mod lbfgs;
pub mod transport;
pub mod wind;

pub use error::{CtmError, Result};
pub use grid::{Grid, PlumeSpec, ScalarField};
