//! Transmittance moments and aperture-averaged scintillation for a round
//! receiver centred on the beam axis, in the long-distance regime.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moments::{turbulent_moments, TurbulentMoments};
use crate::quadrature::{integrate_with_breaks, QuadOptions};
use crate::specfun::bessel_i0_scaled;
use crate::turbulence::{BeamChannel, TurbulenceSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApertureConfig {
    /// Receiver radius R, m.
    pub radius: f64,
}

impl ApertureConfig {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(invalid("radius", format!("must be finite and > 0, got {radius}")));
        }
        Ok(Self { radius })
    }
}

fn asymptotic_moments(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<TurbulentMoments> {
    channel.validate()?;
    if channel.z == 0.0 {
        return Err(Error::SourcePlane);
    }
    let m = turbulent_moments(channel, spectrum)?;
    if m.q2 <= 0.0 {
        return Err(invalid("cn2", "aperture averaging needs cn2 > 0"));
    }
    Ok(m)
}

/// ⟨η⟩ = 1 − exp(−R²/⟨r²⟩_T).
pub fn transmittance_mean(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    aperture: &ApertureConfig,
) -> Result<f64> {
    let m = asymptotic_moments(channel, spectrum)?;
    Ok(-(-aperture.radius.powi(2) / m.r2).exp_m1())
}

/// Variance of η with the interference term collapsed to δ(r − r′).
pub fn transmittance_variance_delta(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    aperture: &ApertureConfig,
) -> Result<f64> {
    let m = asymptotic_moments(channel, spectrum)?;
    Ok(4.0 / (m.q2 * m.r2) * -(-2.0 * aperture.radius.powi(2) / m.r2).exp_m1())
}

/// Variance of η from the interference term integrated over two copies of
/// the aperture. In radii ρ, ρ′ the integrand is
/// 4ρρ′/⟨r²⟩² · I₀(ρρ′|B|) · exp(−(ρ² + ρ′²)A), A = 1/(2⟨r²⟩) + ⟨q²⟩/8,
/// B = 1/⟨r²⟩ − ⟨q²⟩/4, assembled in log space with the scaled I₀.
pub fn transmittance_variance_numeric(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    aperture: &ApertureConfig,
    tol: f64,
) -> Result<f64> {
    if !(1e-8..1.0).contains(&tol) {
        return Err(invalid("tol", format!("must lie in [1e-8, 1), got {tol}")));
    }
    let m = asymptotic_moments(channel, spectrum)?;
    let (r2, q2) = (m.r2, m.q2);
    let a = 0.5 / r2 + q2 / 8.0;
    let b = (1.0 / r2 - q2 / 4.0).abs();
    let log_pref = (4.0 / (r2 * r2)).ln();
    let integrand = |x: f64, y: f64| -> f64 {
        if x == 0.0 || y == 0.0 {
            return 0.0;
        }
        let arg = x * y * b;
        // arg is finite and ≥ 0 here
        let i0s = bessel_i0_scaled(arg).unwrap_or(0.0);
        (log_pref + x.ln() + y.ln() + i0s.ln() + arg - (x * x + y * y) * a).exp()
    };

    // the ridge along ρ′ = ρ has width ~ √(8/⟨q²⟩)
    let width = (8.0 / q2).sqrt();
    let radius = aperture.radius;
    // the variance is at least of order min(delta estimate, ⟨η⟩²); slices far
    // below that only need absolute accuracy
    let mean = transmittance_mean(channel, spectrum, aperture)?;
    let floor = transmittance_variance_delta(channel, spectrum, aperture)?.min(mean * mean);
    let inner_opts = QuadOptions::rel(0.1 * tol).with_abs(0.1 * tol * floor / radius);
    let inner_failure: Cell<Option<Error>> = Cell::new(None);
    let inner = |x: f64| -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let mut breaks = vec![0.0];
        let near = x - 12.0 * width;
        if near > 0.0 {
            breaks.push(near);
        }
        breaks.push(x);
        match integrate_with_breaks(|y| integrand(x, y), &breaks, &inner_opts) {
            Ok(r) => r.value,
            Err(e) => {
                inner_failure.set(Some(e));
                f64::NAN
            }
        }
    };

    let mut breaks = vec![0.0];
    let scale = r2.sqrt();
    for mark in [12.0 * width, 0.5 * scale, scale, 2.0 * scale, 3.0 * scale] {
        if mark < radius && mark > *breaks.last().unwrap() {
            breaks.push(mark);
        }
    }
    breaks.push(radius);
    let outer = integrate_with_breaks(inner, &breaks, &QuadOptions::rel(tol));
    if let Some(e) = inner_failure.take() {
        return Err(e);
    }
    // the triangle ρ′ < ρ covers half of the symmetric square
    Ok(2.0 * outer?.value)
}

/// How the variance of η is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Numeric,
    Delta,
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMethod::Numeric => "numeric",
            VarianceMethod::Delta => "delta",
        })
    }
}

impl FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "numeric" => Ok(VarianceMethod::Numeric),
            "delta" => Ok(VarianceMethod::Delta),
            other => Err(invalid("method", format!("expected numeric or delta, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApertureStats {
    pub radius: f64,
    pub eta_mean: f64,
    pub eta_var: f64,
    /// σ_η² = var/mean².
    pub sigma2: f64,
}

/// Default tolerance of the numeric variance.
pub const APERTURE_TOL: f64 = 1e-8;

pub fn aperture_scintillation(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    aperture: &ApertureConfig,
    method: VarianceMethod,
) -> Result<ApertureStats> {
    let mean = transmittance_mean(channel, spectrum, aperture)?;
    let var = match method {
        VarianceMethod::Numeric => transmittance_variance_numeric(channel, spectrum, aperture, APERTURE_TOL)?,
        VarianceMethod::Delta => transmittance_variance_delta(channel, spectrum, aperture)?,
    };
    if mean == 0.0 {
        return Err(Error::ZeroIntensity);
    }
    Ok(ApertureStats {
        radius: aperture.radius,
        eta_mean: mean,
        eta_var: var,
        sigma2: var / (mean * mean),
    })
}

/// σ_η² over a list of radii, evaluated in parallel.
pub fn scintillation_sweep(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    radii: &[f64],
    method: VarianceMethod,
) -> Vec<Result<ApertureStats>> {
    radii
        .par_iter()
        .map(|&r| aperture_scintillation(channel, spectrum, &ApertureConfig::new(r)?, method))
        .collect()
}
