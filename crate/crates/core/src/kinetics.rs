//! Relaxation frequency γ, its line integral along the characteristic, and
//! the average photon distribution function: the general quadrature form,
//! its long-distance simplification and the asymptotic Gaussian.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moments::{turbulent_moments, TurbulentMoments};
use crate::quadrature::{
    gauss_legendre, integrate, integrate_with_breaks, log_breaks, periodic_trapezoid, QuadOptions,
};
use crate::specfun::{bessel_j0, gamma_fn, kummer_m_minus_one, one_minus_j0};
use crate::turbulence::{alpha_best, BeamChannel, TurbulenceSpectrum, KOLMOGOROV_AMPLITUDE};
use crate::vec2::Vec2;
use crate::SPEED_OF_LIGHT;

/// A point of the transverse phase space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseSpacePoint {
    /// Transverse position, m.
    pub r: Vec2,
    /// Transverse wavevector, m⁻¹.
    pub q: Vec2,
}

impl PhaseSpacePoint {
    pub const fn new(x: f64, y: f64, qx: f64, qy: f64) -> Self {
        Self {
            r: Vec2::new(x, y),
            q: Vec2::new(qx, qy),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite() && self.q.is_finite()
    }

    /// |q|/q₀, small in the paraxial regime.
    pub fn paraxiality(&self, q0: f64) -> f64 {
        self.q.norm() / q0
    }
}

/// Coefficient convention for the asymptotic Gaussian distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdfModel {
    /// Exponent coefficients exactly as printed in the closed form.
    Literal,
    /// Coefficients chosen so the marginals reproduce the beam moments.
    #[default]
    MomentConsistent,
}

impl FromStr for PdfModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Self::Literal),
            "consistent" | "moment-consistent" | "moment_consistent" | "momentconsistent" => Ok(Self::MomentConsistent),
            other => Err(invalid(
                "model",
                format!("expected `literal` or `consistent`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for PdfModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::MomentConsistent => "consistent",
        })
    }
}

fn gamma_minus_5_6() -> f64 {
    static G: OnceLock<f64> = OnceLock::new();
    *G.get_or_init(|| gamma_fn(-5.0 / 6.0).expect("not a pole"))
}

fn check_p(p: f64) -> Result<()> {
    if p.is_nan() || p < 0.0 {
        return Err(Error::Domain(format!("relaxation rate needs P >= 0, got {p}")));
    }
    if p.is_infinite() {
        return Err(Error::Domain("relaxation rate of infinite P".into()));
    }
    Ok(())
}

/// Relaxation frequency for the Tatarskii spectrum in closed form.
pub fn gamma_closed_tatarskii(spectrum: &TurbulenceSpectrum, q0: f64, p: f64) -> Result<f64> {
    check_p(p)?;
    if !spectrum.is_tatarskii() {
        return Err(Error::Incompatible(
            "closed-form relaxation rate needs the Tatarskii spectrum".into(),
        ));
    }
    Ok(gamma_closed_unchecked(spectrum, q0, p))
}

fn gamma_closed_unchecked(spectrum: &TurbulenceSpectrum, q0: f64, p: f64) -> f64 {
    if spectrum.cn2 == 0.0 || p == 0.0 {
        return 0.0;
    }
    let l = spectrum.inner_scale;
    let u = p * p / (4.0 * l * l);
    let m1 = kummer_m_minus_one(u).expect("u is finite and nonnegative");
    2.0 * PI
        * PI
        * SPEED_OF_LIGHT
        * q0
        * q0
        * KOLMOGOROV_AMPLITUDE
        * spectrum.cn2
        * (-gamma_minus_5_6())
        * l.powf(5.0 / 3.0)
        * m1
}

/// Relaxation frequency γ(P) = 4π²c q₀² ∫ k ψ(k) (1 − J₀(kP)) dk by direct
/// quadrature; valid for either spectrum.
pub fn gamma_quadrature(spectrum: &TurbulenceSpectrum, q0: f64, p: f64) -> Result<f64> {
    check_p(p)?;
    if q0.is_nan() || q0 <= 0.0 {
        return Err(invalid("q0", format!("must be > 0, got {q0}")));
    }
    if spectrum.cn2 == 0.0 || p == 0.0 {
        return Ok(0.0);
    }
    let opts = QuadOptions::rel(1e-11).with_max_intervals(4000);
    let k_lo = spectrum.k_low().min(1e-4 / p);
    let k_hi = spectrum.k_high();
    // below k_lo, 1 − J₀(kP) = (kP)²/4 to relative accuracy 1e−9
    let mut total = 0.25 * p * p * spectrum.small_k_tail(3.0, k_lo)?;

    let mut marks = vec![1.0 / spectrum.inner_scale, 1.0 / p];
    if let Some(l0) = spectrum.outer_scale {
        marks.push(1.0 / l0);
    }
    let log_end = (50.0 / p).min(k_hi);
    let breaks = log_breaks(k_lo, log_end, &marks);
    total += integrate_with_breaks(
        |s| {
            let k = s.exp();
            k * k * spectrum.psi_unchecked(k) * one_minus_j0(k * p)
        },
        &breaks,
        &opts,
    )?
    .value;

    if 50.0 / p < k_hi {
        // oscillatory band: one panel per period of J₀
        let band_end = (2000.0 / p).min(k_hi);
        let width = 2.0 * PI / p;
        let mut pts = vec![50.0 / p];
        while *pts.last().expect("nonempty") + width < band_end {
            let next = pts.last().expect("nonempty") + width;
            pts.push(next);
        }
        pts.push(band_end);
        total += integrate_with_breaks(
            |k| k * spectrum.psi_unchecked(k) * (1.0 - bessel_j0(k * p)),
            &pts,
            &opts,
        )?
        .value;
        if band_end < k_hi {
            // J₀ averages out against the slowly varying envelope
            let breaks = log_breaks(band_end, k_hi, &[1.0 / spectrum.inner_scale]);
            total += integrate_with_breaks(
                |s| {
                    let k = s.exp();
                    k * k * spectrum.psi_unchecked(k)
                },
                &breaks,
                &opts,
            )?
            .value;
        }
    }
    Ok(4.0 * PI * PI * SPEED_OF_LIGHT * q0 * q0 * total)
}

/// Relaxation frequency γ(P): closed form for Tatarskii, quadrature for von Karman.
pub fn gamma_relax(spectrum: &TurbulenceSpectrum, q0: f64, p: f64) -> Result<f64> {
    if spectrum.is_tatarskii() {
        gamma_closed_tatarskii(spectrum, q0, p)
    } else {
        gamma_quadrature(spectrum, q0, p)
    }
}

const TABLE_NODES_PER_DECADE: f64 = 64.0;

#[derive(Debug, Clone)]
struct RateTable {
    s0: f64,
    h: f64,
    log_gamma: Vec<f64>,
    slope: Vec<f64>,
    p_min: f64,
    p_max: f64,
    low_factor: f64,
}

/// γ(P) for repeated evaluation, optionally tabulated on a log-log grid with
/// cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct RelaxationRate {
    spectrum: TurbulenceSpectrum,
    q0: f64,
    alpha: f64,
    table: Option<RateTable>,
}

impl RelaxationRate {
    /// Direct evaluation on every call.
    pub fn exact(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<Self> {
        Ok(Self {
            spectrum: *spectrum,
            q0,
            alpha: alpha_best(spectrum, q0)?,
            table: None,
        })
    }

    /// Tabulated evaluation (relative accuracy about 1e−7).
    pub fn tabulated(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<Self> {
        let mut rate = Self::exact(spectrum, q0)?;
        if spectrum.cn2 == 0.0 {
            return Ok(rate);
        }
        let l = spectrum.inner_scale;
        let p_min = 1e-4 * l;
        let p_max = match spectrum.outer_scale {
            Some(l0) => (1e4 * l).max(1e3 * l0),
            None => 1e4 * l,
        };
        let s0 = p_min.ln();
        let decades = (p_max / p_min).log10();
        let n = (decades * TABLE_NODES_PER_DECADE).ceil() as usize + 1;
        let h = (p_max.ln() - s0) / (n - 1) as f64;
        // two guard nodes on each side for the derivative stencil
        let values: Vec<f64> = (0..n + 4)
            .into_par_iter()
            .map(|i| {
                let p = (s0 + (i as f64 - 2.0) * h).exp();
                gamma_relax(spectrum, q0, p).map(f64::ln)
            })
            .collect::<Result<Vec<f64>>>()?;
        let slope = (2..n + 2)
            .map(|i| (values[i - 2] - 8.0 * values[i - 1] + 8.0 * values[i + 1] - values[i + 2]) / (12.0 * h))
            .collect();
        let log_gamma: Vec<f64> = values[2..n + 2].to_vec();
        let low_factor = log_gamma[0].exp() / (rate.alpha * p_min * p_min);
        rate.table = Some(RateTable {
            s0,
            h,
            log_gamma,
            slope,
            p_min,
            p_max: (s0 + (n - 1) as f64 * h).exp(),
            low_factor,
        });
        Ok(rate)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spectrum(&self) -> &TurbulenceSpectrum {
        &self.spectrum
    }

    pub fn q0(&self) -> f64 {
        self.q0
    }

    /// γ(P) for P ≥ 0; NaN if a direct quadrature fails.
    pub fn rate(&self, p: f64) -> f64 {
        if self.spectrum.cn2 == 0.0 || p <= 0.0 {
            return 0.0;
        }
        if let Some(t) = &self.table {
            if p < t.p_min {
                return t.low_factor * self.alpha * p * p;
            }
            if p <= t.p_max {
                let x = (p.ln() - t.s0) / t.h;
                let i = (x.floor() as usize).min(t.log_gamma.len() - 2);
                let u = x - i as f64;
                let (u2, u3) = (u * u, u * u * u);
                let g = (2.0 * u3 - 3.0 * u2 + 1.0) * t.log_gamma[i]
                    + (u3 - 2.0 * u2 + u) * t.h * t.slope[i]
                    + (-2.0 * u3 + 3.0 * u2) * t.log_gamma[i + 1]
                    + (u3 - u2) * t.h * t.slope[i + 1];
                return g.exp();
            }
        }
        if self.spectrum.is_tatarskii() {
            gamma_closed_unchecked(&self.spectrum, self.q0, p)
        } else {
            gamma_quadrature(&self.spectrum, self.q0, p).unwrap_or(f64::NAN)
        }
    }

    /// ∫₀ᵗ γ(|p − k c t′/q₀|) dt′ by adaptive quadrature.
    pub fn time_integral(&self, k: Vec2, p: Vec2, t: f64, opts: &QuadOptions) -> Result<f64> {
        if t.is_nan() || t < 0.0 {
            return Err(invalid("t", format!("must be >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        if k == Vec2::ZERO {
            return Ok(self.rate(p.norm()) * t);
        }
        let v = SPEED_OF_LIGHT / self.q0;
        // closest approach of the line P(t′) to the origin
        let t_star = p.dot(k) / (v * k.norm_sq());
        let mut pts = vec![0.0];
        if t_star > 0.0 && t_star < t {
            pts.push(t_star);
        }
        pts.push(t);
        let r = integrate_with_breaks(|tp| self.rate((p - k * (v * tp)).norm()), &pts, opts)?;
        Ok(r.value)
    }
}

/// ∫₀ᵗ γ(|p − k c t′/q₀|) dt′ with direct evaluation of γ.
pub fn gamma_time_integral(spectrum: &TurbulenceSpectrum, q0: f64, k: Vec2, p: Vec2, t: f64) -> Result<f64> {
    let rate = RelaxationRate::exact(spectrum, q0)?;
    rate.time_integral(k, p, t, &QuadOptions::rel(1e-10))
}

// Exponent level beyond which integrand contributions are dropped (e^(−46) ≈ 1e−20).
const EXPONENT_CUTOFF: f64 = 46.0;
const EXPOSURE_ORDER: usize = 16;

fn gl_nodes() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_legendre(EXPOSURE_ORDER))
}

/// Fixed-order line integral (q₀/c)∫₀^s γ(√(p² + k²τ² − 2pkτ cos ψ)) dτ,
/// split at the closest approach.
fn exposure_fixed(rate: &RelaxationRate, p: f64, k: f64, cos_psi: f64, s_end: f64) -> f64 {
    let (x, w) = gl_nodes();
    let along = p * cos_psi;
    let perp_sq = (p * p - along * along).max(0.0);
    let tau_star = if k > 0.0 { along / k } else { -1.0 };
    let panel = |a: f64, b: f64| -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            let tau = mid + half * xi;
            let d = k * tau - along;
            s += wi * rate.rate((perp_sq + d * d).sqrt());
        }
        s * half
    };
    let total = if tau_star > 0.0 && tau_star < s_end {
        panel(0.0, tau_star) + panel(tau_star, s_end)
    } else {
        panel(0.0, s_end)
    };
    total * rate.q0() / SPEED_OF_LIGHT
}

/// Solves g(x) = target for increasing g on (0, ∞) by bisection in log x.
pub(crate) fn solve_increasing(g: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut tries = 0;
    while g(hi) < target {
        hi *= 10.0;
        tries += 1;
        if tries > 60 {
            return Err(Error::Domain("integration cutoff not found".into()));
        }
    }
    while g(lo) > target && lo > 1e-300 {
        lo *= 0.1;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-10 {
            break;
        }
    }
    Ok(hi)
}

/// A density value together with the quadrature error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdfValue {
    pub value: f64,
    pub error: f64,
}

/// Evaluator for the general average PDF with precomputed tables and cutoffs.
#[derive(Debug, Clone)]
pub struct GeneralPdf {
    channel: BeamChannel,
    rate: RelaxationRate,
    simplified: bool,
    s_end: f64,
    p_max0: f64,
    k_max: f64,
    f_ref: f64,
}

impl GeneralPdf {
    /// With `simplified` the Gaussian source weights are replaced by 1
    /// (the long-distance form).
    pub fn new(channel: &BeamChannel, spectrum: &TurbulenceSpectrum, simplified: bool) -> Result<Self> {
        channel.validate()?;
        spectrum.validate()?;
        if channel.z == 0.0 {
            return Err(invalid("z", "must be > 0 for the general distribution"));
        }
        if simplified && spectrum.cn2 == 0.0 {
            return Err(invalid("cn2", "the simplified form diverges without turbulence"));
        }
        let rate = RelaxationRate::tabulated(spectrum, channel.q0)?;
        let r0 = channel.r0;
        let t = channel.time();
        let s_end = channel.drift_length();
        let src = if simplified { 0.0 } else { 1.0 };

        let p_max0 = solve_increasing(
            |p| t * rate.rate(p) + src * p * p / (2.0 * r0 * r0),
            EXPONENT_CUTOFF,
            1e-6 * r0,
            r0,
        )?;
        // the straight segment centred on the origin minimises the exposure
        let k_max = solve_increasing(
            |k| 2.0 * exposure_fixed(&rate, 0.0, k, 1.0, 0.5 * s_end) + src * k * k * r0 * r0 / 8.0,
            EXPONENT_CUTOFF,
            1e-6 / r0,
            1.0 / r0,
        )?;

        let alpha = rate.alpha();
        let c = SPEED_OF_LIGHT;
        let var_q = 1.0 / (r0 * r0) + 2.0 * alpha * t;
        let var_r =
            r0 * r0 / 4.0 + s_end * s_end / (r0 * r0) + 2.0 / 3.0 * alpha * c * c * t.powi(3) / channel.q0.powi(2);
        let cov = s_end / (r0 * r0) + alpha * c * t * t / channel.q0;
        let det = var_r * var_q - cov * cov;
        let f_ref = channel.n_photons / (4.0 * PI * PI * det);
        Ok(Self {
            channel: *channel,
            rate,
            simplified,
            s_end,
            p_max0,
            k_max,
            f_ref,
        })
    }

    /// Peak density of a Gaussian with the same second moments; sets the
    /// scale of the absolute tolerance.
    pub fn reference_density(&self) -> f64 {
        self.f_ref
    }

    pub fn cutoffs(&self) -> (f64, f64) {
        (self.p_max0, self.k_max)
    }

    /// Density at `point` with error ≤ tol·reference_density().
    pub fn eval(&self, point: &PhaseSpacePoint, tol: f64) -> Result<PdfValue> {
        if tol.is_nan() || tol < 1e-6 {
            return Err(invalid("tol", format!("must be >= 1e-6, got {tol}")));
        }
        if !point.is_finite() {
            return Err(invalid("point", "components must be finite"));
        }
        let prefactor = self.channel.n_photons / (8.0 * PI * PI * PI);
        let target = tol * self.f_ref / prefactor;
        let v = point.r - point.q * self.s_end;
        let (a0, b0) = (v.norm(), point.q.norm());
        let phase = if a0 > 0.0 && b0 > 0.0 {
            v.angle() - point.q.angle()
        } else {
            0.0
        };
        let r0 = self.channel.r0;
        let src = if self.simplified { 0.0 } else { 1.0 };
        let k_max = self.k_max;
        let eps_m = 0.1 * target * 2.0 / (k_max * k_max);
        let failure: RefCell<Option<Error>> = RefCell::new(None);

        let angular = |k: f64, p: f64, eps: f64| -> Result<f64> {
            let weight_log = src * (k * k * r0 * r0 / 8.0 + p * p / (2.0 * r0 * r0));
            let (a, b) = (k * a0, p * b0);
            let r = periodic_trapezoid(
                |psi| {
                    let e = weight_log + exposure_fixed(&self.rate, p, k, psi.cos(), self.s_end);
                    if e > EXPONENT_CUTOFF + 10.0 {
                        return 0.0;
                    }
                    let c2 = (a * a + b * b + 2.0 * a * b * (psi + phase).cos()).max(0.0);
                    bessel_j0(c2.sqrt()) * (-e).exp()
                },
                0.0,
                2.0 * PI,
                &QuadOptions::rel(1e-14).with_abs(eps).with_max_intervals(64),
                16,
            )?;
            Ok(r.value)
        };

        let radial_p = |k: f64| -> f64 {
            if failure.borrow().is_some() {
                return 0.0;
            }
            let p_hi = self.p_max0 + k * self.s_end;
            let eps_psi = 0.1 * eps_m * 2.0 / (p_hi * p_hi);
            let r = integrate(
                |p| {
                    if failure.borrow().is_some() {
                        return 0.0;
                    }
                    match angular(k, p, eps_psi) {
                        Ok(v) => p * v,
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            0.0
                        }
                    }
                },
                0.0,
                p_hi,
                &QuadOptions::rel(1e-14).with_abs(eps_m).with_max_intervals(400),
            );
            match r {
                Ok(r) => k * r.value,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    0.0
                }
            }
        };

        let outer = integrate(
            radial_p,
            0.0,
            k_max,
            &QuadOptions::rel(1e-14).with_abs(0.7 * target).with_max_intervals(400),
        );
        if let Some(e) = failure.into_inner() {
            return Err(scale_quadrature_error(e, prefactor));
        }
        let outer = outer.map_err(|e| scale_quadrature_error(e, prefactor))?;
        Ok(PdfValue {
            value: prefactor * outer.value,
            error: prefactor * outer.error + 0.3 * tol * self.f_ref,
        })
    }
}

fn scale_quadrature_error(e: Error, factor: f64) -> Error {
    match e {
        Error::Quadrature {
            value,
            error,
            requested,
        } => Error::Quadrature {
            value: value * factor,
            error: error * factor,
            requested: requested * factor,
        },
        other => other,
    }
}

/// General average PDF by nested quadrature, normalised to n_photons.
pub fn pdf_general(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    point: &PhaseSpacePoint,
    tol: f64,
) -> Result<f64> {
    Ok(GeneralPdf::new(channel, spectrum, false)?.eval(point, tol)?.value)
}

/// Evaluates the general PDF at many points in parallel; each point uses its
/// own fixed summation order, so results do not depend on the thread count.
pub fn pdf_general_batch(pdf: &GeneralPdf, points: &[PhaseSpacePoint], tol: f64) -> Vec<Result<PdfValue>> {
    points.par_iter().map(|pt| pdf.eval(pt, tol)).collect()
}

/// The long-distance Gaussian distribution
/// f = N·a·b/π² · exp(−a|r − s q|² − b q²), s = z/(2q₀).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticPdf {
    pub model: PdfModel,
    pub a: f64,
    pub b: f64,
    pub shift: f64,
    pub norm: f64,
    pub moments: TurbulentMoments,
}

impl AsymptoticPdf {
    pub fn new(channel: &BeamChannel, spectrum: &TurbulenceSpectrum, model: PdfModel) -> Result<Self> {
        channel.validate()?;
        if channel.z == 0.0 {
            return Err(Error::SourcePlane);
        }
        let moments = turbulent_moments(channel, spectrum)?;
        if moments.q2 <= 0.0 {
            return Err(invalid("cn2", "the asymptotic distribution needs cn2 > 0"));
        }
        let a = 4.0 / moments.r2;
        let b = match model {
            PdfModel::Literal => 4.0 / moments.q2,
            PdfModel::MomentConsistent => 1.0 / moments.q2,
        };
        Ok(Self {
            model,
            a,
            b,
            shift: channel.z / (2.0 * channel.q0),
            norm: channel.n_photons * a * b / (PI * PI),
            moments,
        })
    }

    pub fn eval(&self, point: &PhaseSpacePoint) -> f64 {
        let d = point.r - point.q * self.shift;
        self.norm * (-self.a * d.norm_sq() - self.b * point.q.norm_sq()).exp()
    }

    /// Position of the maximum over r at fixed q.
    pub fn peak_position(&self, q: Vec2) -> Vec2 {
        q * self.shift
    }

    /// ⟨q²⟩ of the q-marginal.
    pub fn q_marginal_mean_sq(&self) -> f64 {
        1.0 / self.b
    }

    /// ⟨r²⟩ of the r-marginal.
    pub fn r_marginal_mean_sq(&self) -> f64 {
        self.shift * self.shift / self.b + 1.0 / self.a
    }
}

/// Asymptotic PDF at a single point.
pub fn pdf_asymptotic(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    point: &PhaseSpacePoint,
    model: PdfModel,
) -> Result<f64> {
    Ok(AsymptoticPdf::new(channel, spectrum, model)?.eval(point))
}

/// Asymptotic areal photon density N/(π⟨r²⟩_T)·exp(−r²/⟨r²⟩_T).
pub fn photon_density(channel: &BeamChannel, spectrum: &TurbulenceSpectrum, r: Vec2) -> Result<f64> {
    channel.validate()?;
    if channel.z == 0.0 {
        return Err(Error::SourcePlane);
    }
    let m = turbulent_moments(channel, spectrum)?;
    if m.r2 <= 0.0 {
        return Err(invalid("cn2", "the asymptotic density needs cn2 > 0"));
    }
    Ok(channel.n_photons / (PI * m.r2) * (-r.norm_sq() / m.r2).exp())
}

/// Parses `x,y,qx,qy` rows (header optional, `#` comments skipped).
pub fn parse_points_csv(text: &str) -> Result<Vec<PhaseSpacePoint>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(Error::Domain(format!("line {}: expected x,y,qx,qy", lineno + 1)));
        }
        let parsed: std::result::Result<Vec<f64>, _> = fields[..4].iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => out.push(PhaseSpacePoint::new(v[0], v[1], v[2], v[3])),
            Err(_) if out.is_empty() && fields[0].eq_ignore_ascii_case("x") => continue,
            Err(e) => return Err(Error::Domain(format!("line {}: {e}", lineno + 1))),
        }
    }
    Ok(out)
}

/// Formats `x,y,qx,qy,f` rows with a header.
pub fn format_pdf_csv(points: &[PhaseSpacePoint], values: &[f64]) -> String {
    let mut s = String::from("x,y,qx,qy,f\n");
    for (p, f) in points.iter().zip(values) {
        s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", p.r.x, p.r.y, p.q.x, p.q.y, f));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn tat() -> TurbulenceSpectrum {
        TurbulenceSpectrum::tatarskii(2.5e-14, 1e-3).unwrap()
    }

    fn channel() -> BeamChannel {
        BeamChannel::new(0.01, 1e7, 20_000.0, 1.0).unwrap()
    }

    #[test]
    fn model_parsing() {
        assert_eq!("literal".parse::<PdfModel>().unwrap(), PdfModel::Literal);
        assert_eq!("Consistent".parse::<PdfModel>().unwrap(), PdfModel::MomentConsistent);
        assert!("other".parse::<PdfModel>().is_err());
        assert_eq!(PdfModel::default(), PdfModel::MomentConsistent);
    }

    #[test]
    fn gamma_basic_values() {
        let s = tat();
        assert_eq!(gamma_relax(&s, 1e7, 0.0).unwrap(), 0.0);
        assert!(gamma_relax(&s, 1e7, -1.0).is_err());
        let alpha = alpha_best(&s, 1e7).unwrap();
        let p = 1e-5;
        assert!(rel(gamma_relax(&s, 1e7, p).unwrap(), alpha * p * p) < 1e-5);
    }

    #[test]
    fn gamma_closed_matches_quadrature() {
        let s = tat();
        for p in [1e-8, 1e-5, 1e-3, 1e-2, 0.3, 10.0, 1e3, 1e5] {
            let c = gamma_closed_tatarskii(&s, 1e7, p).unwrap();
            let q = gamma_quadrature(&s, 1e7, p).unwrap();
            assert!(rel(q, c) < 1e-7, "P = {p}: {q} vs {c}");
        }
    }

    #[test]
    fn von_karman_gamma_saturates_at_nu() {
        let s = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        let nu = crate::turbulence::nu(&s, 1e7).unwrap();
        let g = gamma_relax(&s, 1e7, 1e4).unwrap();
        assert!(rel(g, nu) < 1e-6);
    }

    #[test]
    fn tabulated_rate_matches_direct() {
        for s in [tat(), TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 10.0).unwrap()] {
            let exact = RelaxationRate::exact(&s, 1e7).unwrap();
            let table = RelaxationRate::tabulated(&s, 1e7).unwrap();
            let mut p = 3.3e-9;
            while p < 1e3 {
                let e = exact.rate(p);
                let t = table.rate(p);
                assert!(rel(t, e) < 1e-6, "P = {p}: {t} vs {e}");
                p *= 1.37;
            }
        }
    }

    #[test]
    fn time_integral_cases() {
        let s = tat();
        let q0 = 1e7;
        let p = Vec2::new(2e-3, -1e-3);
        assert_eq!(gamma_time_integral(&s, q0, Vec2::new(1.0, 0.0), p, 0.0).unwrap(), 0.0);
        let t = 1e-5;
        let g = gamma_relax(&s, q0, p.norm()).unwrap();
        assert_eq!(gamma_time_integral(&s, q0, Vec2::ZERO, p, t).unwrap(), g * t);

        // generic case against a fixed high-order Gauss rule at double resolution
        let k = Vec2::new(0.3, 0.4);
        let got = gamma_time_integral(&s, q0, k, p, 6e-5).unwrap();
        let v = SPEED_OF_LIGHT / q0;
        let t_star = p.dot(k) / (v * k.norm_sq());
        let oracle = |n: usize| {
            let mut sum = 0.0;
            for (a, b) in [(0.0, t_star), (t_star, 6e-5)] {
                let (x, w) = gauss_legendre(n);
                for (xi, wi) in x.iter().zip(&w) {
                    let tp = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                    sum += 0.5 * (b - a) * wi * gamma_relax(&s, q0, (p - k * (v * tp)).norm()).unwrap();
                }
            }
            sum
        };
        let (o1, o2) = (oracle(40), oracle(80));
        assert!(rel(o1, o2) < 1e-6);
        assert!(rel(got, o2) < 1e-6, "{got} vs {o2}");
    }

    #[test]
    fn exposure_fixed_matches_adaptive() {
        let s = tat();
        let q0 = 1e7;
        let ch = channel();
        let rate = RelaxationRate::tabulated(&s, q0).unwrap();
        let (p, k, psi) = (4e-3, 2.0, 0.7f64);
        let e_fixed = exposure_fixed(&rate, p, k, psi.cos(), ch.drift_length());
        let kv = Vec2::from_polar(k, 0.0);
        let pv = Vec2::from_polar(p, psi);
        let e = gamma_time_integral(&s, q0, kv, pv, ch.time()).unwrap();
        assert!(rel(e_fixed, e) < 1e-5, "{e_fixed} vs {e}");
    }

    #[test]
    fn asymptotic_peak_and_marginals() {
        let ch = channel();
        let s = tat();
        for model in [PdfModel::Literal, PdfModel::MomentConsistent] {
            let f = AsymptoticPdf::new(&ch, &s, model).unwrap();
            let q = Vec2::new(0.0, 673.5);
            let peak = f.peak_position(q);
            assert!((peak.y - 0.673_5).abs() < 1e-3);
            let at = |y: f64| {
                f.eval(&PhaseSpacePoint {
                    r: Vec2::new(0.0, y),
                    q,
                })
            };
            assert!(at(peak.y) > at(peak.y + 1e-3));
            assert!(at(peak.y) > at(peak.y - 1e-3));
        }
        let lit = AsymptoticPdf::new(&ch, &s, PdfModel::Literal).unwrap();
        let m = lit.moments;
        assert!(rel(lit.q_marginal_mean_sq(), m.q2 / 4.0) < 1e-14);
        assert!(rel(lit.r_marginal_mean_sq(), 7.0 / 16.0 * m.r2) < 1e-14);
        let con = AsymptoticPdf::new(&ch, &s, PdfModel::MomentConsistent).unwrap();
        assert!(rel(con.q_marginal_mean_sq(), m.q2) < 1e-14);
        assert!(rel(con.r_marginal_mean_sq(), m.r2) < 1e-14);
    }

    #[test]
    fn reference_peak_location() {
        // q_y = √(αt) places the maximum near y = 0.673 m
        let ch = channel();
        let f = AsymptoticPdf::new(&ch, &tat(), PdfModel::MomentConsistent).unwrap();
        let qy = (f.moments.alpha * ch.time()).sqrt();
        assert!(rel(qy, 673.225_838_407_477_3) < 1e-12);
        assert!(rel(f.peak_position(Vec2::new(0.0, qy)).y, 0.673_225_838_407_477_3) < 1e-12);
    }

    #[test]
    fn consistent_q_moment_on_grid() {
        // ⟨q²⟩ from a grid sum over (r, q) in the consistent model
        let ch = channel();
        let f = AsymptoticPdf::new(&ch, &tat(), PdfModel::MomentConsistent).unwrap();
        let sq = f.moments.q2.sqrt();
        let sr = f.moments.r2.sqrt();
        let n = 24;
        let hq = 8.0 * sq / n as f64;
        let hr = 6.0 * sr / n as f64;
        let (mut m0, mut m2) = (0.0, 0.0);
        for iqx in 0..n {
            for iqy in 0..n {
                let q = Vec2::new(-4.0 * sq + (iqx as f64 + 0.5) * hq, -4.0 * sq + (iqy as f64 + 0.5) * hq);
                let c = f.peak_position(q);
                let mut inner = 0.0;
                for ix in 0..n {
                    for iy in 0..n {
                        let r = c + Vec2::new(-3.0 * sr + (ix as f64 + 0.5) * hr, -3.0 * sr + (iy as f64 + 0.5) * hr);
                        inner += f.eval(&PhaseSpacePoint { r, q });
                    }
                }
                m0 += inner;
                m2 += inner * q.norm_sq();
            }
        }
        assert!(rel(m0 * hq * hq * hr * hr, 1.0) < 5e-3);
        assert!(rel(m2 / m0, f.moments.q2) < 5e-3);
    }

    #[test]
    fn photon_density_values() {
        let ch = channel();
        let s = tat();
        let d0 = photon_density(&ch, &s, Vec2::ZERO).unwrap();
        assert!(rel(d0, 0.131_683_041_117_666_557) < 1e-12);
        let m = turbulent_moments(&ch, &s).unwrap();
        let r = Vec2::new(0.7, -0.4);
        let ratio = photon_density(&ch, &s, r).unwrap() / d0;
        assert!(rel(ratio, (-r.norm_sq() / m.r2).exp()) < 1e-14);
        assert_eq!(photon_density(&ch.at_distance(0.0), &s, r), Err(Error::SourcePlane));
        assert_eq!(
            pdf_asymptotic(&ch.at_distance(0.0), &s, &PhaseSpacePoint::default(), PdfModel::Literal),
            Err(Error::SourcePlane)
        );
    }

    #[test]
    fn general_pdf_without_turbulence_is_gaussian() {
        let ch = BeamChannel::new(0.01, 1e7, 2_000.0, 1.0).unwrap();
        let s = tat().scaled(0.0);
        let pdf = GeneralPdf::new(&ch, &s, false).unwrap();
        let r0 = ch.r0;
        let sd = ch.drift_length();
        for pt in [
            PhaseSpacePoint::new(0.0, 0.0, 0.0, 0.0),
            PhaseSpacePoint::new(3e-3, -1e-3, 50.0, 20.0),
            PhaseSpacePoint::new(1e-2, 4e-3, -90.0, 130.0),
        ] {
            let v = pt.r - pt.q * sd;
            let want = 1.0 / (PI * PI) * (-2.0 * v.norm_sq() / (r0 * r0) - pt.q.norm_sq() * r0 * r0 / 2.0).exp();
            let got = pdf.eval(&pt, 1e-5).unwrap();
            assert!(
                (got.value - want).abs() < 1e-4 * pdf.reference_density(),
                "{got:?} vs {want}"
            );
        }
    }

    #[test]
    fn general_pdf_drift_anisotropy() {
        let ch = channel();
        let pdf = GeneralPdf::new(&ch, &tat(), false).unwrap();
        let q = Vec2::new(0.0, 700.0);
        let fwd = pdf
            .eval(
                &PhaseSpacePoint {
                    r: Vec2::new(0.0, 0.5),
                    q,
                },
                1e-3,
            )
            .unwrap();
        let back = pdf
            .eval(
                &PhaseSpacePoint {
                    r: Vec2::new(0.0, -0.5),
                    q,
                },
                1e-3,
            )
            .unwrap();
        assert!(fwd.value > back.value + fwd.error + back.error);
    }

    #[test]
    fn general_pdf_rejects_bad_input() {
        let ch = channel();
        assert!(GeneralPdf::new(&ch.at_distance(0.0), &tat(), false).is_err());
        assert!(GeneralPdf::new(&ch, &tat().scaled(0.0), true).is_err());
        let pdf = GeneralPdf::new(&ch, &tat(), false).unwrap();
        assert!(pdf.eval(&PhaseSpacePoint::default(), 1e-8).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "# comment\nx,y,qx,qy\n0,1,2,3\n1e-3, -2, 5, 0.5\n";
        let pts = parse_points_csv(text).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1], PhaseSpacePoint::new(1e-3, -2.0, 5.0, 0.5));
        let out = format_pdf_csv(&pts, &[1.0, 2.0]);
        assert!(out.starts_with("x,y,qx,qy,f\n"));
        assert_eq!(out.lines().count(), 3);
        assert!(parse_points_csv("0,1,2\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gamma_nonnegative_and_monotone(log_p in -7.0f64..4.0, step in 1.0001f64..3.0) {
            let s = tat();
            let p = 10f64.powf(log_p);
            let g1 = gamma_relax(&s, 1e7, p).unwrap();
            let g2 = gamma_relax(&s, 1e7, p * step).unwrap();
            prop_assert!(g1 >= 0.0);
            prop_assert!(g2 >= g1);
        }
    }
}
