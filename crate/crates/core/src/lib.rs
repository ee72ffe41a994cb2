//! Kinetic (photon distribution function) description of paraxial laser
//! beams in atmospheric turbulence.

#![allow(clippy::excessive_precision)]

pub mod aperture;
pub mod error;
pub mod fourth_moment;
pub mod kinetics;
pub mod moments;
pub mod montecarlo;
pub mod quadrature;
pub mod specfun;
pub mod turbulence;
pub mod validation;
pub mod vec2;

pub use error::{Error, Result};
pub use kinetics::{PdfModel, PhaseSpacePoint};
pub use turbulence::{BeamChannel, TurbulenceSpectrum};
pub use vec2::Vec2;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
