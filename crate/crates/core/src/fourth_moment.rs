//! Equal-time fourth moment ⟨Î(r)Î(r′)⟩ under the Gaussian closure: shot,
//! mean-product and interference terms, the delta-correlated limit and the
//! quantum/classical boundary radius.
//!
//! The normalisation is by the photon number N, so the terms are areal
//! densities (shot, m⁻²) and products of densities (m⁻⁴).

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kinetics::{photon_density, AsymptoticPdf, PdfModel, PhaseSpacePoint};
use crate::moments::turbulent_moments;
use crate::turbulence::{BeamChannel, TurbulenceSpectrum};
use crate::vec2::Vec2;

/// The three contributions to ⟨Î(r)Î(r′)⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourthMomentTerms {
    /// Coefficient of δ(r − r′), equal to ⟨Î(r)⟩.
    pub shot_coefficient: f64,
    /// ⟨Î(r)⟩⟨Î(r′)⟩.
    pub mean_product: f64,
    /// |𝓕((r + r′)/2, r − r′)|².
    pub correlation_term: f64,
}

/// Rectangular grid of transverse wavevectors, nodes at origin + (i·hx, j·hy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QGrid {
    pub origin: Vec2,
    pub spacing: Vec2,
    pub nx: usize,
    pub ny: usize,
}

impl QGrid {
    /// Square grid of `n`×`n` nodes centred on `center` spanning ±`half_width`.
    pub fn centered(center: Vec2, half_width: f64, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(invalid("nodes", format!("need at least 3 nodes per axis, got {n}")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(invalid(
                "half_width",
                format!("must be finite and > 0, got {half_width}"),
            ));
        }
        let h = 2.0 * half_width / (n - 1) as f64;
        Ok(Self {
            origin: center - Vec2::new(half_width, half_width),
            spacing: Vec2::new(h, h),
            nx: n,
            ny: n,
        })
    }

    pub fn node(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64 * self.spacing.x, j as f64 * self.spacing.y)
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing.x * self.spacing.y
    }
}

/// Samples f(m, q) of the mean distribution at a fixed midpoint m.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdfSlice {
    pub midpoint: Vec2,
    pub grid: QGrid,
    /// Row-major, index `j * nx + i`.
    pub f_values: Vec<f64>,
}

// Minimum half-extent of the grid around the q-mean, in standard deviations.
const COVERAGE_SIGMAS: f64 = 6.0;

impl PdfSlice {
    pub fn new(midpoint: Vec2, grid: QGrid, f_values: Vec<f64>) -> Result<Self> {
        if f_values.len() != grid.nx * grid.ny {
            return Err(invalid(
                "f_values",
                format!("expected {} samples, got {}", grid.nx * grid.ny, f_values.len()),
            ));
        }
        if let Some(v) = f_values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(
                "f_values",
                format!("samples must be finite and >= 0, found {v}"),
            ));
        }
        let slice = Self {
            midpoint,
            grid,
            f_values,
        };
        slice.check_coverage()?;
        Ok(slice)
    }

    /// Samples `f` on `grid` at the given midpoint.
    pub fn sample(midpoint: Vec2, grid: QGrid, f: impl Fn(&PhaseSpacePoint) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.nx * grid.ny);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(&PhaseSpacePoint {
                    r: midpoint,
                    q: grid.node(i, j),
                }));
            }
        }
        Self::new(midpoint, grid, values)
    }

    /// Slice of the long-distance Gaussian, gridded over ±8σ of its
    /// conditional q-distribution with `n` nodes per axis.
    pub fn asymptotic(pdf: &AsymptoticPdf, midpoint: Vec2, n: usize) -> Result<Self> {
        let (center, sigma) = conditional_q(pdf, midpoint);
        let grid = QGrid::centered(center, 8.0 * sigma, n)?;
        Self::sample(midpoint, grid, |pt| pdf.eval(pt))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.f_values[j * self.grid.nx + i]
    }

    fn check_coverage(&self) -> Result<()> {
        let g = &self.grid;
        let (mut w, mut mx, mut my, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let f = self.get(i, j);
                let q = g.node(i, j);
                w += f;
                mx += f * q.x;
                my += f * q.y;
                sx += f * q.x * q.x;
                sy += f * q.y * q.y;
            }
        }
        if w == 0.0 {
            return Ok(());
        }
        let (mx, my) = (mx / w, my / w);
        let sdx = (sx / w - mx * mx).max(0.0).sqrt();
        let sdy = (sy / w - my * my).max(0.0).sqrt();
        let far = g.node(g.nx - 1, g.ny - 1);
        let ok = |lo: f64, hi: f64, m: f64, sd: f64| m - lo >= COVERAGE_SIGMAS * sd && hi - m >= COVERAGE_SIGMAS * sd;
        if !ok(g.origin.x, far.x, mx, sdx) || !ok(g.origin.y, far.y, my, sdy) {
            return Err(invalid(
                "q_grid",
                format!("grid must cover {COVERAGE_SIGMAS} standard deviations of the q-distribution"),
            ));
        }
        Ok(())
    }
}

/// Mean and per-axis standard deviation of q given r for the Gaussian form.
fn conditional_q(pdf: &AsymptoticPdf, r: Vec2) -> (Vec2, f64) {
    let s = pdf.shift;
    let prec = pdf.a * s * s + pdf.b;
    (r * (pdf.a * s / prec), (0.5 / prec).sqrt())
}

/// 𝓕(m, dr) = Σ_q f(m, q)·exp(−i q·dr)·Δq on the slice grid.
pub fn fourier_f(slice: &PdfSlice, dr: Vec2) -> Result<Complex64> {
    let g = &slice.grid;
    for (axis, sep, h) in [('x', dr.x, g.spacing.x), ('y', dr.y, g.spacing.y)] {
        let limit = PI / h;
        if sep.abs() >= limit {
            return Err(Error::Nyquist {
                axis,
                separation: sep.abs(),
                limit,
            });
        }
    }
    let phase = |q0: f64, h: f64, n: usize, d: f64| -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::from_polar(1.0, -(q0 + i as f64 * h) * d))
            .collect()
    };
    let ex = phase(g.origin.x, g.spacing.x, g.nx, dr.x);
    let ey = phase(g.origin.y, g.spacing.y, g.ny, dr.y);
    let mut total = Complex64::new(0.0, 0.0);
    for (j, row) in slice.f_values.chunks(g.nx).enumerate() {
        let s: Complex64 = row.iter().zip(&ex).map(|(&f, &e)| e * f).sum();
        total += s * ey[j];
    }
    Ok(total * g.cell_area())
}

/// Source of mean-distribution slices and densities for the closure.
pub trait SliceProvider: Sync {
    fn slice(&self, midpoint: Vec2) -> Result<PdfSlice>;
    fn density(&self, r: Vec2) -> Result<f64>;
}

/// Slices of the long-distance Gaussian distribution.
#[derive(Debug, Clone, Copy)]
pub struct AsymptoticSlices {
    pub pdf: AsymptoticPdf,
    pub nodes: usize,
}

impl AsymptoticSlices {
    pub fn new(channel: &BeamChannel, spectrum: &TurbulenceSpectrum, model: PdfModel) -> Result<Self> {
        Ok(Self {
            pdf: AsymptoticPdf::new(channel, spectrum, model)?,
            nodes: 65,
        })
    }
}

impl SliceProvider for AsymptoticSlices {
    fn slice(&self, midpoint: Vec2) -> Result<PdfSlice> {
        PdfSlice::asymptotic(&self.pdf, midpoint, self.nodes)
    }

    fn density(&self, r: Vec2) -> Result<f64> {
        let p = &self.pdf;
        let s = p.shift;
        let prec = p.a * s * s + p.b;
        Ok(p.norm * PI / prec * (-r.norm_sq() * p.a * p.b / prec).exp())
    }
}

/// Gaussian-closure terms from the slice at (r + r′)/2.
pub fn gamma4_general(provider: &dyn SliceProvider, r: Vec2, r_prime: Vec2) -> Result<FourthMomentTerms> {
    let mid = (r + r_prime) * 0.5;
    let slice = provider.slice(mid)?;
    let f = fourier_f(&slice, r - r_prime)?;
    let d = provider.density(r)?;
    let d_prime = provider.density(r_prime)?;
    Ok(FourthMomentTerms {
        shot_coefficient: d,
        mean_product: d * d_prime,
        correlation_term: f.norm_sqr(),
    })
}

pub fn gamma4_general_batch(provider: &dyn SliceProvider, pairs: &[(Vec2, Vec2)]) -> Vec<Result<FourthMomentTerms>> {
    pairs
        .par_iter()
        .map(|&(r, rp)| gamma4_general(provider, r, rp))
        .collect()
}

/// Long-distance closed form. The literal and moment-consistent
/// normalisations coincide for this expression, so `model` only selects
/// the documented variant.
pub fn gamma4_closed(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    r: Vec2,
    r_prime: Vec2,
    _model: PdfModel,
) -> Result<FourthMomentTerms> {
    let d = photon_density(channel, spectrum, r)?;
    let d_prime = photon_density(channel, spectrum, r_prime)?;
    let m = turbulent_moments(channel, spectrum)?;
    let peak = channel.n_photons / (PI * m.r2);
    let corr = peak * peak * (-(r + r_prime).norm_sq() / (2.0 * m.r2) - (r - r_prime).norm_sq() * m.q2 / 8.0).exp();
    Ok(FourthMomentTerms {
        shot_coefficient: d,
        mean_product: d * d_prime,
        correlation_term: corr,
    })
}

pub fn gamma4_closed_batch(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    pairs: &[(Vec2, Vec2)],
    model: PdfModel,
) -> Vec<Result<FourthMomentTerms>> {
    pairs
        .par_iter()
        .map(|&(r, rp)| gamma4_closed(channel, spectrum, r, rp, model))
        .collect()
}

/// Correlation length √(8/⟨q²⟩_T) of the interference term.
pub fn correlation_decay_length(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    let m = turbulent_moments(channel, spectrum)?;
    if m.q2 <= 0.0 {
        return Err(invalid("cn2", "needs cn2 > 0 and z > 0"));
    }
    Ok((8.0 / m.q2).sqrt())
}

/// Coefficients of δ(r − r′) in ⟨δÎ δÎ′⟩ once the interference term is
/// collapsed to a delta function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluctuationCorrelation {
    /// ⟨Î(r)⟩, m⁻².
    pub shot: f64,
    /// (8π/⟨q²⟩_T)·⟨Î(r)⟩², m⁻².
    pub classical_coefficient: f64,
}

pub fn fluctuation_correlation(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    r: Vec2,
) -> Result<FluctuationCorrelation> {
    let d = photon_density(channel, spectrum, r)?;
    let m = turbulent_moments(channel, spectrum)?;
    Ok(FluctuationCorrelation {
        shot: d,
        classical_coefficient: 8.0 * PI / m.q2 * d * d,
    })
}

/// Radius where classical and shot noise are equal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantumBoundary {
    /// r_q in m; `None` when shot noise dominates everywhere.
    pub radius: Option<f64>,
    /// Photon number below which no boundary exists, ⟨r²⟩_T⟨q²⟩_T/8.
    pub threshold_photons: f64,
    /// λ_q = 2π/√⟨q²⟩_T, m.
    pub lambda_q: f64,
    /// a = ⟨Î(r_q)⟩^(−1/2), m; equal to √(8π/⟨q²⟩_T) by construction.
    pub cell_size: f64,
    /// λ_q − √(π/2)·a.
    pub identity_residual: f64,
}

pub fn quantum_classical_boundary(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<QuantumBoundary> {
    channel.validate()?;
    let m = turbulent_moments(channel, spectrum)?;
    if m.q2 <= 0.0 {
        return Err(invalid("cn2", "needs cn2 > 0 and z > 0"));
    }
    let threshold = m.r2 * m.q2 / 8.0;
    let radius = if channel.n_photons > threshold {
        Some((m.r2 * (channel.n_photons / threshold).ln()).sqrt())
    } else {
        None
    };
    let lambda_q = 2.0 * PI / m.q2.sqrt();
    let cell_size = (8.0 * PI / m.q2).sqrt();
    Ok(QuantumBoundary {
        radius,
        threshold_photons: threshold,
        lambda_q,
        cell_size,
        identity_residual: lambda_q - (PI / 2.0).sqrt() * cell_size,
    })
}

/// Relative intensity variance at r. With `cell_area` set, the shot term
/// is included with δ(0) replaced by 1/cell_area.
pub fn scintillation_index(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    r: Vec2,
    cell_area: Option<f64>,
) -> Result<f64> {
    let t = gamma4_closed(channel, spectrum, r, r, PdfModel::MomentConsistent)?;
    if t.shot_coefficient == 0.0 || t.mean_product == 0.0 {
        return Err(Error::ZeroIntensity);
    }
    let mut sigma2 = t.correlation_term / t.mean_product;
    if let Some(area) = cell_area {
        if !(area.is_finite() && area > 0.0) {
            return Err(invalid("cell_area", format!("must be finite and > 0, got {area}")));
        }
        sigma2 += t.shot_coefficient / (area * t.mean_product);
    }
    Ok(sigma2)
}
