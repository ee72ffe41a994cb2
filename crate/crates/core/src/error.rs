use thiserror::Error;

/// Errors raised by the numerical kernels and models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("infrared divergence: psi(0) is infinite for the Tatarskii spectrum")]
    InfraredDivergence,

    #[error("divergent nu: outer scale required")]
    DivergentNu,

    #[error("gamma function pole at x = {0}")]
    GammaPole(f64),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error(
        "quadrature did not reach tolerance: estimate {value:e}, error estimate {error:e}, requested {requested:e}"
    )]
    Quadrature { value: f64, error: f64, requested: f64 },

    #[error("q-grid too coarse for separation {separation:e} m along {axis} (limit {limit:e} m)")]
    Nyquist { axis: char, separation: f64, limit: f64 },

    #[error("incompatible model and spectrum: {0}")]
    Incompatible(String),

    #[error("asymptotic distribution is undefined at the source plane (z = 0)")]
    SourcePlane,

    #[error("mean intensity is zero at the requested point")]
    ZeroIntensity,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
