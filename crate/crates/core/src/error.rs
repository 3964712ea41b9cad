use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZpgError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("configuration {index} of the virtual grid failed: {source}")]
    BatchConfig {
        index: usize,
        #[source]
        source: Box<ZpgError>,
    },

    #[error("aliasing failure: imaginary residue {residue:.3e} exceeds {limit:.1e}")]
    Aliasing { residue: f64, limit: f64 },

    #[error("g2 undefined: mean photon number {mu:.3e} is below 1e-12")]
    UndefinedG2 { mu: f64 },

    #[error("oracle refused: estimated {estimated:.3e} evaluations exceeds guard {limit:.1e}")]
    GuardRefused { estimated: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, ZpgError>;
