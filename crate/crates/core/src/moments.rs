//! Beam moments ⟨q²⟩ and ⟨r²⟩ in closed form and by quadrature, regime
//! classification and the total-flux fluctuation estimate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{AsymptoticPdf, PdfModel, RelaxationRate};
use crate::quadrature::{integrate, QuadOptions};
use crate::turbulence::{alpha_best, nu, BeamChannel, TurbulenceSpectrum};
use crate::SPEED_OF_LIGHT;

/// Turbulent contributions to the beam moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbulentMoments {
    /// Momentum diffusion coefficient α, m⁻²·s⁻¹.
    pub alpha: f64,
    /// ⟨q²⟩_T = 4αt, m⁻².
    pub q2: f64,
    /// ⟨r²⟩_T = 4z³α/(3c q₀²), m².
    pub r2: f64,
}

pub fn turbulent_moments(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<TurbulentMoments> {
    let alpha = alpha_best(spectrum, channel.q0)?;
    let z = channel.z;
    Ok(TurbulentMoments {
        alpha,
        q2: 4.0 * alpha * channel.time(),
        r2: 4.0 * z.powi(3) * alpha / (3.0 * SPEED_OF_LIGHT * channel.q0 * channel.q0),
    })
}

/// ⟨q²⟩ = 2/r₀² + 4αt.
pub fn mean_q2_closed(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    let m = turbulent_moments(channel, spectrum)?;
    Ok(2.0 / (channel.r0 * channel.r0) + m.q2)
}

/// ⟨r²⟩ = (r₀²/2)(1 + 4z²/(r₀⁴q₀²)) + ⟨r²⟩_T.
pub fn mean_r2_closed(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    let m = turbulent_moments(channel, spectrum)?;
    Ok(diffraction_r2(channel) + m.r2)
}

/// Free-diffraction ⟨r²⟩.
pub fn diffraction_r2(channel: &BeamChannel) -> f64 {
    let r0 = channel.r0;
    let z = channel.z;
    0.5 * r0 * r0 * (1.0 + 4.0 * z * z / (r0.powi(4) * channel.q0 * channel.q0))
}

/// Turbulent part ⟨r²⟩_T alone.
pub fn mean_r2_turbulent(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    Ok(turbulent_moments(channel, spectrum)?.r2)
}

/// Curvature lim f(h)/h² as h → 0, by Richardson extrapolation in h² over
/// successive halvings of `h0`. Returns the value and the last correction.
fn curvature_at_origin(f: impl Fn(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const LEVELS: usize = 6;
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(LEVELS);
    for i in 0..LEVELS {
        let h = h0 / f64::powi(2.0, i as i32);
        let mut row = vec![f(h)? / (h * h)];
        for j in 1..=i {
            let scale = f64::powi(4.0, j as i32);
            let prev = row[j - 1];
            row.push(prev + (prev - table[i - 1][j - 1]) / (scale - 1.0));
        }
        table.push(row);
    }
    let last = &table[LEVELS - 1];
    let value = last[LEVELS - 1];
    let error = (value - table[LEVELS - 2][LEVELS - 2]).abs();
    if !value.is_finite() {
        return Err(Error::Domain("non-finite curvature".into()));
    }
    Ok((value, error))
}

// Largest probe distance relative to the smallest spectral scale.
const PROBE_FRACTION: f64 = 0.05;

fn probe_scale(spectrum: &TurbulenceSpectrum) -> f64 {
    spectrum
        .outer_scale
        .map_or(spectrum.inner_scale, |l0| spectrum.inner_scale.min(l0))
}

/// ⟨q²⟩ = −∇²g(0)/g(0) for the transform g(p) = exp(−p²/(2r₀²) − γ(p)t),
/// with the curvature of γ taken numerically from the exact rate.
pub fn mean_q2_quadrature(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    channel.validate()?;
    if channel.z == 0.0 {
        return Err(Error::SourcePlane);
    }
    let r0 = channel.r0;
    if spectrum.cn2 == 0.0 {
        return Ok(2.0 / (r0 * r0));
    }
    let rate = RelaxationRate::exact(spectrum, channel.q0)?;
    let h0 = PROBE_FRACTION * probe_scale(spectrum);
    let (curv, error) = curvature_at_origin(|p| Ok(rate.rate(p)), h0)?;
    let t = channel.time();
    // ∇² of a radial c·p² is 4c
    let value = 2.0 / (r0 * r0) + 4.0 * curv * t;
    check_moment_error(value, 4.0 * error * t)
}

/// ⟨r²⟩ from the curvature of the exposure ∫₀ᵗ γ(k c t′/q₀) dt′ at k = 0.
pub fn mean_r2_quadrature(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    channel.validate()?;
    if channel.z == 0.0 {
        return Err(Error::SourcePlane);
    }
    if spectrum.cn2 == 0.0 {
        return Ok(diffraction_r2(channel));
    }
    let rate = RelaxationRate::exact(spectrum, channel.q0)?;
    let q0 = channel.q0;
    let s_end = channel.drift_length();
    // ∫₀ᵗ γ(k c t′/q₀) dt′ = (q₀/(c k)) ∫₀^(k s) γ(x) dx
    let exposure = |k: f64| -> Result<f64> {
        let opts = QuadOptions::rel(1e-13);
        let r = integrate(|x| rate.rate(x), 0.0, k * s_end, &opts)?;
        Ok(q0 / (SPEED_OF_LIGHT * k) * r.value)
    };
    let k0 = PROBE_FRACTION * probe_scale(spectrum) / s_end;
    let (curv, error) = curvature_at_origin(exposure, k0)?;
    let value = diffraction_r2(channel) + 4.0 * curv;
    check_moment_error(value, 4.0 * error)
}

fn check_moment_error(value: f64, error: f64) -> Result<f64> {
    if !(value.is_finite() && error <= 1e-6 * value.abs()) {
        return Err(Error::Quadrature {
            value,
            error,
            requested: 1e-6 * value.abs(),
        });
    }
    Ok(value)
}

/// Propagation regime relative to the relaxation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Short,
    Intermediate,
    Long,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Short => "short",
            Regime::Intermediate => "intermediate",
            Regime::Long => "long",
        })
    }
}

impl Regime {
    pub fn from_group(x: f64) -> Self {
        if x < 0.1 {
            Regime::Short
        } else if x > 10.0 {
            Regime::Long
        } else {
            Regime::Intermediate
        }
    }
}

/// ν·t for spectra with an outer scale; `None` for Tatarskii.
pub fn nu_t(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<Option<f64>> {
    if spectrum.is_tatarskii() {
        return Ok(None);
    }
    Ok(Some(nu(spectrum, channel.q0)? * channel.time()))
}

/// Regime from ν·t, or from α·t·l₀′² when ν diverges.
pub fn regime(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<Regime> {
    let group = match nu_t(channel, spectrum)? {
        Some(x) => x,
        None => alpha_best(spectrum, channel.q0)? * channel.time() * spectrum.inner_scale.powi(2),
    };
    Ok(Regime::from_group(group))
}

/// Correlation length √(8/⟨q²⟩_T); infinite without turbulence.
pub fn correlation_length(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    let m = turbulent_moments(channel, spectrum)?;
    Ok(if m.q2 > 0.0 { (8.0 / m.q2).sqrt() } else { f64::INFINITY })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub z: f64,
    pub mean_q2: f64,
    pub mean_r2: f64,
    pub nu_t: Option<f64>,
    pub regime: Regime,
    pub correlation_length: f64,
    /// √⟨q²⟩/q₀.
    pub paraxiality: f64,
}

pub fn moment_report(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<MomentReport> {
    let mean_q2 = mean_q2_closed(channel, spectrum)?;
    Ok(MomentReport {
        z: channel.z,
        mean_q2,
        mean_r2: mean_r2_closed(channel, spectrum)?,
        nu_t: nu_t(channel, spectrum)?,
        regime: regime(channel, spectrum)?,
        correlation_length: correlation_length(channel, spectrum)?,
        paraxiality: mean_q2.sqrt() / channel.q0,
    })
}

/// Relative fluctuation of the total photon flux.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxFluctuation {
    /// (2π)²∫∫f² dr dq / N² for the asymptotic distribution.
    pub relative_variance: f64,
    /// Order-of-magnitude estimate 1/(⟨q²⟩_T⟨r²⟩_T).
    pub scaling_estimate: f64,
}

pub fn total_flux_fluctuation(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<FluxFluctuation> {
    total_flux_fluctuation_with(channel, spectrum, PdfModel::MomentConsistent)
}

pub fn total_flux_fluctuation_with(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    model: PdfModel,
) -> Result<FluxFluctuation> {
    let f = AsymptoticPdf::new(channel, spectrum, model)?;
    // the Gaussian integral of f² is N²ab/(4π²)
    Ok(FluxFluctuation {
        relative_variance: f.a * f.b,
        scaling_estimate: 1.0 / (f.moments.q2 * f.moments.r2),
    })
}
