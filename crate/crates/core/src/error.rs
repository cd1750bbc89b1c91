//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtmError>;

#[derive(Debug, Error)]
pub enum CtmError {
    /// Two fields (or a field and a wind) do not live on the same grid.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A geometric object does not fit inside the domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A feature is too small to be represented on the grid.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// A parameter record violates its own invariant.
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("config error at line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("unknown config key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },

    #[error("time {t} s outside wind time range [{start}, {end}] s")]
    TimeRange { t: f64, start: f64, end: f64 },

    /// Advection precondition violated: Courant number above the limit.
    #[error("CFL violated: Courant number {courant} exceeds limit {limit}")]
    Cfl { courant: f64, limit: f64 },

    /// Explicit diffusion stability bound violated.
    #[error("diffusion stability violated: dt*d_h*(1/dx^2+1/dy^2) = {value} > 0.5")]
    DiffusionStability { value: f64 },

    #[error("wind ingestion failed at snapshot {snapshot}: {reason}")]
    Ingestion { snapshot: usize, reason: String },

    /// The adjoint was asked to replay a schedule that does not belong to
    /// the requested time window.
    #[error("adjoint pairing error: {0}")]
    Pairing(String),

    #[error("matrix capacity exceeded: {cells} cells > cap {cap}")]
    Capacity { cells: usize, cap: usize },

    #[error("degenerate reference field: {0}")]
    DegenerateReference(String),

    #[error("undefined center of mass: {0}")]
    UndefinedCenter(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CtmError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CtmError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CtmError::Invalid { .. } | CtmError::ConfigSyntax { .. } | CtmError::UnknownKey { .. }
        )
    }
}
