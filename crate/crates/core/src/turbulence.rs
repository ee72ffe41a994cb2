//! Refractive-index turbulence spectra and the scalar rates derived from them.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, integrate_with_breaks, log_breaks, QuadOptions};
use crate::specfun::gamma_fn;
use crate::vec2::Vec2;
use crate::SPEED_OF_LIGHT;

/// Amplitude of the Kolmogorov spectrum, ψ = 0.033 Cn² k^(−11/3).
pub const KOLMOGOROV_AMPLITUDE: f64 = 0.033;

// Beyond k = 10/l the Gaussian factor is below e^(−100).
const UPPER_CUTOFF: f64 = 10.0;

/// Von Karman (with outer scale) or Tatarskii (without) spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceSpectrum {
    /// Structure constant Cn², m^(−2/3).
    pub cn2: f64,
    /// Inner scale l₀′, m.
    pub inner_scale: f64,
    /// Outer scale L₀, m; `None` selects the Tatarskii form.
    pub outer_scale: Option<f64>,
}

impl TurbulenceSpectrum {
    pub fn new(cn2: f64, inner_scale: f64, outer_scale: Option<f64>) -> Result<Self> {
        let s = Self {
            cn2,
            inner_scale,
            outer_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn tatarskii(cn2: f64, inner_scale: f64) -> Result<Self> {
        Self::new(cn2, inner_scale, None)
    }

    pub fn von_karman(cn2: f64, inner_scale: f64, outer_scale: f64) -> Result<Self> {
        Self::new(cn2, inner_scale, Some(outer_scale))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cn2.is_finite() && self.cn2 >= 0.0) {
            return Err(invalid("cn2", format!("must be finite and >= 0, got {}", self.cn2)));
        }
        if !(self.inner_scale.is_finite() && self.inner_scale > 0.0) {
            return Err(invalid(
                "inner_scale",
                format!("must be finite and > 0, got {}", self.inner_scale),
            ));
        }
        if let Some(l0) = self.outer_scale {
            if !(l0.is_finite() && l0 > self.inner_scale) {
                return Err(invalid(
                    "outer_scale",
                    format!("must be finite and larger than the inner scale, got {l0}"),
                ));
            }
        }
        Ok(())
    }

    pub fn is_tatarskii(&self) -> bool {
        self.outer_scale.is_none()
    }

    /// Copy with the structure constant multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cn2: self.cn2 * factor,
            ..*self
        }
    }

    fn inv_outer_sq(&self) -> f64 {
        self.outer_scale.map_or(0.0, |l0| 1.0 / (l0 * l0))
    }

    /// Spectral density ψ(k).
    pub fn psi(&self, k: f64) -> Result<f64> {
        if k.is_nan() || k < 0.0 {
            return Err(Error::Domain(format!("psi needs k >= 0, got {k}")));
        }
        if self.cn2 == 0.0 {
            return Ok(0.0);
        }
        if k == 0.0 && self.is_tatarskii() {
            return Err(Error::InfraredDivergence);
        }
        Ok(self.psi_unchecked(k))
    }

    pub(crate) fn psi_unchecked(&self, k: f64) -> f64 {
        let kl = k * self.inner_scale;
        KOLMOGOROV_AMPLITUDE * self.cn2 * (-kl * kl).exp() / (k * k + self.inv_outer_sq()).powf(11.0 / 6.0)
    }

    /// Lower end of the numerically integrated range; below it the
    /// integrands are replaced by their leading small-k behaviour.
    pub(crate) fn k_low(&self) -> f64 {
        match self.outer_scale {
            Some(l0) => 1e-6 / l0,
            None => 1e-5 / self.inner_scale,
        }
    }

    /// Upper end of the integrated range.
    pub fn k_high(&self) -> f64 {
        UPPER_CUTOFF / self.inner_scale
    }

    /// Radial moment ∫₀^∞ kⁿ ψ(k) dk.
    pub fn radial_moment(&self, n: f64) -> Result<f64> {
        self.radial_moment_upto(n, self.k_high())
    }

    /// Radial moment truncated at `k_max`.
    pub fn radial_moment_upto(&self, n: f64, k_max: f64) -> Result<f64> {
        if self.cn2 == 0.0 {
            return Ok(0.0);
        }
        let k_lo = self.k_low();
        let tail = self.small_k_tail(n, k_lo)?;
        if k_max <= k_lo {
            return Err(Error::Domain(format!(
                "upper limit {k_max} below the tail cutoff {k_lo}"
            )));
        }
        let mut marks = vec![1.0 / self.inner_scale];
        if let Some(l0) = self.outer_scale {
            marks.push(1.0 / l0);
        }
        let breaks = log_breaks(k_lo, k_max, &marks);
        let body = integrate_with_breaks(
            |s| {
                let k = s.exp();
                k.powf(n + 1.0) * self.psi_unchecked(k)
            },
            &breaks,
            &QuadOptions::rel(1e-12),
        )?;
        Ok(tail + body.value)
    }

    /// ∫₀^k_lo kⁿ ψ dk from the small-k form of the spectrum.
    pub(crate) fn small_k_tail(&self, n: f64, k_lo: f64) -> Result<f64> {
        let amp = KOLMOGOROV_AMPLITUDE * self.cn2;
        match self.outer_scale {
            Some(l0) => {
                if n <= -1.0 {
                    return Err(Error::Domain(format!("radial moment of order {n} diverges")));
                }
                Ok(amp * l0.powf(11.0 / 3.0) * k_lo.powf(n + 1.0) / (n + 1.0))
            }
            None => {
                let p = n - 8.0 / 3.0;
                if p <= 0.0 {
                    return Err(if n == 1.0 {
                        Error::DivergentNu
                    } else {
                        Error::InfraredDivergence
                    });
                }
                let l = self.inner_scale;
                Ok(amp * (k_lo.powf(p) / p - l * l * k_lo.powf(p + 2.0) / (p + 2.0)))
            }
        }
    }
}

/// Source and propagation geometry of the beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamChannel {
    /// Source radius r₀, m.
    pub r0: f64,
    /// Carrier wavenumber q₀, m⁻¹.
    pub q0: f64,
    /// Propagation distance z, m.
    pub z: f64,
    /// Total photon number N.
    pub n_photons: f64,
}

impl BeamChannel {
    pub fn new(r0: f64, q0: f64, z: f64, n_photons: f64) -> Result<Self> {
        let c = Self { r0, q0, z, n_photons };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0.is_finite() && self.r0 > 0.0) {
            return Err(invalid("r0", format!("must be finite and > 0, got {}", self.r0)));
        }
        check_q0(self.q0)?;
        if !(self.z.is_finite() && self.z >= 0.0) {
            return Err(invalid("z", format!("must be finite and >= 0, got {}", self.z)));
        }
        if !(self.n_photons.is_finite() && self.n_photons > 0.0) {
            return Err(invalid(
                "n_photons",
                format!("must be finite and > 0, got {}", self.n_photons),
            ));
        }
        Ok(())
    }

    /// Copy at a different propagation distance.
    pub fn at_distance(&self, z: f64) -> Self {
        Self { z, ..*self }
    }

    pub fn with_photons(&self, n_photons: f64) -> Self {
        Self { n_photons, ..*self }
    }

    /// Propagation time t = z/c.
    pub fn time(&self) -> f64 {
        self.z / SPEED_OF_LIGHT
    }

    /// Carrier frequency ω₀ = c q₀.
    pub fn omega0(&self) -> f64 {
        SPEED_OF_LIGHT * self.q0
    }

    /// Ballistic displacement per unit transverse wavevector after time t: c t / q₀.
    pub fn drift_length(&self) -> f64 {
        self.z / self.q0
    }
}

/// Total scattering rate ν = 4π²c q₀² ∫ k ψ dk, s⁻¹.
pub fn nu(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<f64> {
    check_q0(q0)?;
    if spectrum.cn2 == 0.0 {
        return Ok(0.0);
    }
    if spectrum.is_tatarskii() {
        return Err(Error::DivergentNu);
    }
    Ok(4.0 * PI * PI * SPEED_OF_LIGHT * q0 * q0 * spectrum.radial_moment(1.0)?)
}

/// Momentum diffusion coefficient α = π²c q₀² ∫ k³ ψ dk, m⁻²·s⁻¹.
pub fn alpha(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<f64> {
    check_q0(q0)?;
    Ok(PI * PI * SPEED_OF_LIGHT * q0 * q0 * spectrum.radial_moment(3.0)?)
}

/// Closed-form α for the Tatarskii spectrum.
pub fn alpha_closed_tatarskii(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<f64> {
    check_q0(q0)?;
    if !spectrum.is_tatarskii() {
        return Err(Error::Incompatible(
            "closed-form alpha needs the Tatarskii spectrum".into(),
        ));
    }
    let g = gamma_fn(1.0 / 6.0)?;
    Ok(0.5
        * KOLMOGOROV_AMPLITUDE
        * PI
        * PI
        * g
        * spectrum.cn2
        * q0
        * q0
        * SPEED_OF_LIGHT
        * spectrum.inner_scale.powf(-1.0 / 3.0))
}

/// α from the closed form when available, otherwise by quadrature.
pub fn alpha_best(spectrum: &TurbulenceSpectrum, q0: f64) -> Result<f64> {
    if spectrum.is_tatarskii() {
        alpha_closed_tatarskii(spectrum, q0)
    } else {
        alpha(spectrum, q0)
    }
}

fn check_q0(q0: f64) -> Result<()> {
    if !(q0.is_finite() && q0 > 0.0) {
        return Err(invalid("q0", format!("must be finite and > 0, got {q0}")));
    }
    Ok(())
}

/// Inverse-CDF sampler for scattering kicks k′ with density ∝ ψ(k′) d²k′.
#[derive(Debug, Clone)]
pub struct KickSampler {
    log_k: Vec<f64>,
    cdf: Vec<f64>,
    k_min: f64,
    /// ∫ ψ d²k over the tabulated range.
    total: f64,
}

const KICK_TABLE_NODES: usize = 4096;

impl KickSampler {
    /// Sampler for an integrable (von Karman) spectrum.
    pub fn new(spectrum: &TurbulenceSpectrum) -> Result<Self> {
        if spectrum.is_tatarskii() {
            return Err(Error::DivergentNu);
        }
        Self::build(spectrum, 0.0)
    }

    /// Sampler with an explicit infrared cutoff: kicks below `k_min` are dropped.
    pub fn with_ir_cutoff(spectrum: &TurbulenceSpectrum, k_min: f64) -> Result<Self> {
        if !(k_min.is_finite() && k_min > 0.0) {
            return Err(invalid("k_min", format!("must be finite and > 0, got {k_min}")));
        }
        Self::build(spectrum, k_min)
    }

    fn build(spectrum: &TurbulenceSpectrum, k_min: f64) -> Result<Self> {
        if spectrum.cn2 == 0.0 {
            return Err(invalid("cn2", "kick distribution is empty for zero turbulence"));
        }
        let lo = if k_min > 0.0 { k_min } else { spectrum.k_low() };
        let hi = spectrum.k_high();
        if lo >= hi {
            return Err(invalid("k_min", "infrared cutoff above the inner-scale cutoff"));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let log_k: Vec<f64> = (0..KICK_TABLE_NODES)
            .map(|i| a + (b - a) * i as f64 / (KICK_TABLE_NODES - 1) as f64)
            .collect();
        // mass below the first node: analytic for the von Karman plateau
        let head = if k_min > 0.0 {
            0.0
        } else {
            let l0 = spectrum.outer_scale.expect("von Karman checked above");
            KOLMOGOROV_AMPLITUDE * spectrum.cn2 * l0.powf(11.0 / 3.0) * lo * lo / 2.0
        };
        let mut cdf = Vec::with_capacity(KICK_TABLE_NODES);
        let mut acc = head;
        cdf.push(acc);
        let opts = QuadOptions::rel(1e-10);
        for w in log_k.windows(2) {
            let piece = integrate(
                |s| {
                    let k = s.exp();
                    k * k * spectrum.psi_unchecked(k)
                },
                w[0],
                w[1],
                &opts,
            )?;
            acc += piece.value;
            cdf.push(acc);
        }
        let total = 2.0 * PI * acc;
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(Self {
            log_k,
            cdf,
            k_min: if k_min > 0.0 { 0.0 } else { lo },
            total,
        })
    }

    /// ∫ ψ(k) d²k over the sampled range.
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    /// Draws a kick magnitude.
    pub fn sample_magnitude<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.cdf[0] {
            // plateau below the table: density ∝ k, so k² is uniform
            return self.k_min * (u / self.cdf[0]).sqrt();
        }
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        (self.log_k[i - 1] + frac * (self.log_k[i] - self.log_k[i - 1])).exp()
    }

    /// Draws an isotropic kick vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let k = self.sample_magnitude(rng);
        let theta: f64 = rng.random::<f64>() * 2.0 * PI;
        Vec2::from_polar(k, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn reference() -> TurbulenceSpectrum {
        TurbulenceSpectrum::tatarskii(2.5e-14, 1e-3).unwrap()
    }

    #[test]
    fn psi_reference_and_limits() {
        let s = reference();
        assert!(rel(s.psi(1000.0).unwrap(), 3.035_005_389_664_399_153_163e-27) < 1e-13);
        assert_eq!(s.psi(0.0), Err(Error::InfraredDivergence));
        assert_eq!(s.scaled(0.0).psi(0.0).unwrap(), 0.0);
        let vk = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        assert!(vk.psi(0.0).unwrap().is_finite());
        assert_eq!(vk.psi(1e6).unwrap(), 0.0);
    }

    #[test]
    fn invalid_spectra_rejected() {
        assert!(TurbulenceSpectrum::new(-1.0, 1e-3, None).is_err());
        assert!(TurbulenceSpectrum::new(1e-14, 0.0, None).is_err());
        assert!(TurbulenceSpectrum::new(1e-14, 1e-3, Some(1e-4)).is_err());
    }

    #[test]
    fn alpha_quadrature_matches_closed_form() {
        let s = reference();
        let closed = alpha_closed_tatarskii(&s, 1e7).unwrap();
        assert!(rel(closed, 6_793_792_198.021_342_274_956_62) < 1e-13);
        let quad = alpha(&s, 1e7).unwrap();
        assert!(rel(quad, closed) < 1e-10, "{quad} vs {closed}");
    }

    #[test]
    fn nu_reference_and_errors() {
        assert_eq!(nu(&reference(), 1e7), Err(Error::DivergentNu));
        assert_eq!(nu(&reference().scaled(0.0), 1e7).unwrap(), 0.0);
        let vk = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        assert!(rel(nu(&vk, 1e7).unwrap(), 585_819_831.513_671_077) < 1e-9);
        let vk10 = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 10.0).unwrap();
        assert!(rel(nu(&vk10, 1e7).unwrap(), 27_192_667_382.690_609_6) < 1e-9);
    }

    #[test]
    fn nu_matches_two_dimensional_grid() {
        // trapezoid over a log-radial by angle grid of the 2-D integral
        let vk = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        let q0 = 1e7;
        let (nr, na) = (4000, 16);
        let (a, b) = ((1e-6f64).ln(), (1e4f64).ln());
        let h = (b - a) / nr as f64;
        let mut sum = 0.0;
        for i in 0..=nr {
            let k = (a + i as f64 * h).exp();
            let w = if i == 0 || i == nr { 0.5 } else { 1.0 };
            for j in 0..na {
                let th = 2.0 * PI * j as f64 / na as f64;
                let kv = Vec2::from_polar(k, th);
                sum += w * k * k * vk.psi(kv.norm()).unwrap() * (2.0 * PI / na as f64);
            }
        }
        let grid = 2.0 * PI * SPEED_OF_LIGHT * q0 * q0 * sum * h;
        assert!(rel(nu(&vk, q0).unwrap(), grid) < 1e-5);
    }

    #[test]
    fn nu_converges_with_upper_limit() {
        let vk = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        let full = vk.radial_moment(1.0).unwrap();
        let longer = vk.radial_moment_upto(1.0, 20.0 / vk.inner_scale).unwrap();
        assert!(rel(longer, full) < 1e-12);
    }

    #[test]
    fn kick_sampler_moments() {
        let vk = TurbulenceSpectrum::von_karman(2.5e-14, 1e-3, 1.0).unwrap();
        let sampler = KickSampler::new(&vk).unwrap();
        assert!(rel(sampler.total_weight(), 2.0 * PI * vk.radial_moment(1.0).unwrap()) < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut bins = [0usize; 16];
        for _ in 0..n {
            let k = sampler.sample(&mut rng);
            assert!(k.is_finite());
            let k2 = k.norm_sq();
            s1 += k2;
            s2 += k2 * k2;
            let a = k.angle().rem_euclid(2.0 * PI);
            bins[((a / (2.0 * PI) * 16.0) as usize).min(15)] += 1;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let want = vk.radial_moment(3.0).unwrap() / vk.radial_moment(1.0).unwrap();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
        // chi-square with 15 degrees of freedom, 1% critical value 30.58
        let e = n as f64 / 16.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 30.58, "chi2 = {chi2}");
    }

    #[test]
    fn kick_sampler_needs_integrable_spectrum() {
        assert_eq!(KickSampler::new(&reference()).unwrap_err(), Error::DivergentNu);
        assert!(KickSampler::with_ir_cutoff(&reference(), 1.0).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn psi_is_linear_in_cn2(c in 0.0f64..10.0, k in 1e-2f64..1e4) {
            let s = reference();
            let lhs = s.scaled(c).psi(k).unwrap();
            let rhs = c * s.psi(k).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs());
            prop_assert!(lhs >= 0.0);
        }

        #[test]
        fn alpha_closed_form_over_inner_scales(log_l in -4.0f64..-2.0) {
            let s = TurbulenceSpectrum::tatarskii(2.5e-14, 10f64.powf(log_l)).unwrap();
            let q = alpha(&s, 1e7).unwrap();
            let c = alpha_closed_tatarskii(&s, 1e7).unwrap();
            prop_assert!(rel(q, c) < 1e-8);
        }

        #[test]
        fn rates_monotone_in_cn2(c1 in 0.0f64..1e-13, c2 in 0.0f64..1e-13) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let a = TurbulenceSpectrum::von_karman(lo, 1e-3, 10.0).unwrap();
            let b = TurbulenceSpectrum::von_karman(hi, 1e-3, 10.0).unwrap();
            prop_assert!(nu(&a, 1e7).unwrap() <= nu(&b, 1e7).unwrap());
            prop_assert!(alpha(&a, 1e7).unwrap() <= alpha(&b, 1e7).unwrap());
        }
    }
}
