//! Reference checks over the whole library: closed forms against
//! quadrature, Monte Carlo against analytics, and the structural
//! properties of the fourth moment and aperture averaging.
//!
//! Expected values come from formulas written out here independently of
//! the library code paths under test. A fault can be injected by scaling
//! the structure constant seen by the code under test, which perturbs α
//! while the expected values stay put.

use std::f64::consts::PI;
use std::time::Instant;

use serde::Serialize;

use crate::aperture::{aperture_scintillation, transmittance_variance_delta, ApertureConfig, VarianceMethod};
use crate::error::Result;
use crate::fourth_moment::{
    fluctuation_correlation, gamma4_closed, gamma4_general, quantum_classical_boundary, scintillation_index,
    AsymptoticSlices,
};
use crate::kinetics::{gamma_closed_tatarskii, gamma_quadrature, PdfModel};
use crate::moments::{mean_q2_quadrature, mean_r2_quadrature};
use crate::montecarlo::{equivalence_check, format_histogram_csv, format_moments_csv, simulate, McConfig, McModel};
use crate::turbulence::{BeamChannel, TurbulenceSpectrum};
use crate::vec2::Vec2;
use crate::SPEED_OF_LIGHT;

/// Γ(1/6).
const GAMMA_ONE_SIXTH: f64 = 5.566_316_001_780_235;

/// One comparison with its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub expected: f64,
    pub got: f64,
    /// Tolerance in the units described by `kind`.
    pub tol: f64,
    pub kind: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    fn relative(name: impl Into<String>, expected: f64, got: f64, tol: f64) -> Self {
        let passed = (got - expected).abs() <= tol * expected.abs();
        Self::make(name, expected, got, tol, "relative", passed)
    }

    fn absolute(name: impl Into<String>, expected: f64, got: f64, tol: f64) -> Self {
        let passed = (got - expected).abs() <= tol;
        Self::make(name, expected, got, tol, "absolute", passed)
    }

    /// |got − expected| ≤ k·se.
    fn standard_errors(name: impl Into<String>, expected: f64, got: f64, se: f64, k: f64) -> Self {
        let passed = (got - expected).abs() <= k * se;
        let mut c = Self::make(name, expected, got, k * se, "absolute", passed);
        c.note = format!("{k} standard errors, se = {se:e}");
        c
    }

    fn range(name: impl Into<String>, lo: f64, hi: f64, got: f64) -> Self {
        let passed = got >= lo && got <= hi;
        let mut c = Self::make(name, 0.5 * (lo + hi), got, 0.5 * (hi - lo), "absolute", passed);
        c.note = format!("range [{lo}, {hi}]");
        c
    }

    fn at_most(name: impl Into<String>, got: f64, limit: f64) -> Self {
        Self::make(name, 0.0, got, limit, "upper bound", got <= limit)
    }

    fn failed(name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        let mut c = Self::make(name, f64::NAN, f64::NAN, f64::NAN, "error", false);
        c.note = err.to_string();
        c
    }

    fn make(name: impl Into<String>, expected: f64, got: f64, tol: f64, kind: &'static str, passed: bool) -> Self {
        Self {
            name: name.into(),
            expected,
            got,
            tol,
            kind,
            passed: passed && got.is_finite(),
            note: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub alpha_scale: f64,
    pub passed: bool,
    pub criteria: Vec<CriterionResult>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// Factor applied to Cₙ² (hence α) in the code under test; 1 is pristine.
    pub alpha_scale: f64,
    pub mc_photons: usize,
    pub equivalence_photons: usize,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            alpha_scale: 1.0,
            mc_photons: 100_000,
            equivalence_photons: 20_000,
            seed: 20_240_601,
        }
    }
}

pub const CRITERIA: [(u8, &str); 8] = [
    (1, "relaxation rate consistency"),
    (2, "beam moments by quadrature"),
    (3, "Monte Carlo against analytics"),
    (4, "saturated scintillation"),
    (5, "aperture averaging"),
    (6, "channel ordering of large-aperture scintillation"),
    (7, "fourth-moment closure"),
    (8, "Monte Carlo determinism"),
];

/// Reference channel: r₀ = 1 cm, q₀ = 1e7 m⁻¹, z = 20 km, N = 1e8.
pub fn reference_channel() -> BeamChannel {
    BeamChannel {
        r0: 0.01,
        q0: 1e7,
        z: 20_000.0,
        n_photons: 1e8,
    }
}

/// Reference spectrum: Tatarskii, Cₙ² = 2.5e−14 m^(−2/3), l = 1 mm.
pub fn reference_spectrum() -> TurbulenceSpectrum {
    TurbulenceSpectrum {
        cn2: 2.5e-14,
        inner_scale: 1e-3,
        outer_scale: None,
    }
}

struct Oracle {
    alpha: f64,
}

impl Oracle {
    fn new(spectrum: &TurbulenceSpectrum, q0: f64) -> Self {
        let alpha = 0.0165
            * PI
            * PI
            * GAMMA_ONE_SIXTH
            * spectrum.cn2
            * q0
            * q0
            * SPEED_OF_LIGHT
            * spectrum.inner_scale.powf(-1.0 / 3.0);
        Self { alpha }
    }

    fn q2_turb(&self, ch: &BeamChannel) -> f64 {
        4.0 * self.alpha * ch.z / SPEED_OF_LIGHT
    }

    fn r2_turb(&self, ch: &BeamChannel) -> f64 {
        4.0 * ch.z.powi(3) * self.alpha / (3.0 * SPEED_OF_LIGHT * ch.q0 * ch.q0)
    }

    fn q2(&self, ch: &BeamChannel) -> f64 {
        2.0 / (ch.r0 * ch.r0) + self.q2_turb(ch)
    }

    fn r2(&self, ch: &BeamChannel) -> f64 {
        diffraction(ch) + self.r2_turb(ch)
    }
}

fn diffraction(ch: &BeamChannel) -> f64 {
    0.5 * ch.r0 * ch.r0 + 2.0 * ch.z * ch.z / (ch.r0 * ch.r0 * ch.q0 * ch.q0)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn push<T>(checks: &mut Vec<Check>, name: &str, r: Result<T>, f: impl FnOnce(T) -> Check) {
    match r {
        Ok(v) => checks.push(f(v)),
        Err(e) => checks.push(Check::failed(name, e)),
    }
}

fn criterion_1(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let truth = reference_spectrum();
    let s = truth.scaled(opts.alpha_scale);
    let q0 = ch.q0;
    let oracle = Oracle::new(&truth, q0);
    let mut checks = Vec::new();

    let worst = |grid: &[f64]| -> Result<f64> {
        let mut w: f64 = 0.0;
        for &p in grid {
            let a = gamma_closed_tatarskii(&s, q0, p)?;
            let b = gamma_quadrature(&s, q0, p)?;
            w = w.max(((a - b) / b).abs());
        }
        Ok(w)
    };
    push(
        &mut checks,
        "gamma closed vs quadrature, P in [1e-2, 1e5] m",
        worst(&log_grid(1e-2, 1e5, 29)),
        |w| Check::at_most("gamma closed vs quadrature, P in [1e-2, 1e5] m", w, 1e-5),
    );
    push(
        &mut checks,
        "gamma closed vs quadrature, P in [1e-8, 1e-2] m",
        worst(&log_grid(1e-8, 1e-2, 25)),
        |w| Check::at_most("gamma closed vs quadrature, P in [1e-8, 1e-2] m", w, 1e-5),
    );

    // small-argument regime P ≤ 1e−2·l
    let small = || -> Result<(f64, f64)> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in log_grid(1e-8, 1e-2 * truth.inner_scale, 7) {
            let g = gamma_quadrature(&s, q0, p)?;
            let r = g / (oracle.alpha * p * p);
            lo = lo.min(r);
            hi = hi.max(r);
        }
        Ok((lo, hi))
    };
    match small() {
        Ok((lo, hi)) => {
            checks.push(Check::range("gamma/(alpha P^2) min, P <= 1e-2 l", 0.999, 1.001, lo));
            checks.push(Check::range("gamma/(alpha P^2) max, P <= 1e-2 l", 0.999, 1.001, hi));
        }
        Err(e) => checks.push(Check::failed("gamma/(alpha P^2), P <= 1e-2 l", e)),
    }

    let large = || -> Result<f64> {
        let p = 1e6;
        Ok(gamma_quadrature(&s, q0, 2.0 * p)? / gamma_quadrature(&s, q0, p)?)
    };
    push(&mut checks, "gamma(2P)/gamma(P) at P = 1e6 m", large(), |r| {
        Check::relative("gamma(2P)/gamma(P) at P = 1e6 m", 2f64.powf(5.0 / 3.0), r, 0.01)
    });
    checks
}

fn criterion_2(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let truth = reference_spectrum();
    let s = truth.scaled(opts.alpha_scale);
    let oracle = Oracle::new(&truth, ch.q0);
    let mut checks = Vec::new();
    push(
        &mut checks,
        "<q^2> quadrature at 20 km",
        mean_q2_quadrature(&ch, &s),
        |v| Check::relative("<q^2> quadrature at 20 km", oracle.q2(&ch), v, 0.01),
    );
    push(
        &mut checks,
        "<r^2> quadrature at 20 km",
        mean_r2_quadrature(&ch, &s),
        |v| Check::relative("<r^2> quadrature at 20 km", oracle.r2(&ch), v, 0.02),
    );
    let calm = TurbulenceSpectrum { cn2: 0.0, ..truth };
    push(
        &mut checks,
        "<q^2> without turbulence",
        mean_q2_quadrature(&ch, &calm),
        |v| Check::relative("<q^2> without turbulence", 2.0 / (ch.r0 * ch.r0), v, f64::EPSILON),
    );
    push(
        &mut checks,
        "<r^2> without turbulence",
        mean_r2_quadrature(&ch, &calm),
        |v| Check::relative("<r^2> without turbulence", diffraction(&ch), v, 2.0 * f64::EPSILON),
    );
    checks
}

fn criterion_3(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let truth = reference_spectrum();
    let s = truth.scaled(opts.alpha_scale);
    let oracle = Oracle::new(&truth, ch.q0);
    let mut checks = Vec::new();
    let mut cfg = McConfig::new(
        opts.mc_photons,
        opts.seed,
        McModel::Force,
        vec![5_000.0, 10_000.0, 20_000.0],
    );
    cfg.worker_hint = rayon::current_num_threads();
    match simulate(&cfg, &ch, &s) {
        Ok(out) => {
            for m in &out.samples {
                let c = ch.at_distance(m.z);
                let km = m.z / 1000.0;
                checks.push(Check::standard_errors(
                    format!("random force <q^2> at {km} km"),
                    oracle.q2(&c),
                    m.mean_q2,
                    m.se_q2,
                    3.0,
                ));
                checks.push(Check::standard_errors(
                    format!("random force <r^2> at {km} km"),
                    oracle.r2(&c),
                    m.mean_r2,
                    m.se_r2,
                    3.0,
                ));
            }
        }
        Err(e) => checks.push(Check::failed("random force simulation", e)),
    }

    let vk = TurbulenceSpectrum {
        cn2: 2.5e-16 * opts.alpha_scale,
        inner_scale: 1e-3,
        outer_scale: Some(10.0),
    };
    let eq_channel = ch.at_distance(10_000.0);
    match equivalence_check(&eq_channel, &vk, opts.equivalence_photons, opts.seed) {
        Ok(rep) => {
            checks.push(Check::range(
                "nu t of the equivalence run",
                10.0,
                f64::INFINITY,
                rep.nu_t,
            ));
            let mut q = Check::at_most("collision vs random force <q^2>", rep.rel_diff_q2, rep.allowed_q2);
            q.note = "relative difference, bound max(3 SE, 2%)".into();
            checks.push(q);
            let mut r = Check::at_most("collision vs random force <r^2>", rep.rel_diff_r2, rep.allowed_r2);
            r.note = "relative difference, bound max(3 SE, 2%)".into();
            checks.push(r);
            checks.push(Check::at_most(
                "small-argument kernel identity",
                rep.kernel_identity_residual,
                1e-6,
            ));
        }
        Err(e) => checks.push(Check::failed("collision vs random force", e)),
    }
    checks
}

fn criterion_4(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let s = reference_spectrum().scaled(opts.alpha_scale);
    let mut checks = Vec::new();
    for x in [0.0, 0.3, 0.8, 1.5, 2.5] {
        let name = format!("sigma^2 at r = {x} m");
        push(
            &mut checks,
            &name,
            scintillation_index(&ch, &s, Vec2::new(x, 0.0), None),
            |v| Check::absolute(&name, 1.0, v, 1e-10),
        );
    }
    checks
}

fn criterion_5(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let truth = reference_spectrum();
    let s = truth.scaled(opts.alpha_scale);
    let oracle = Oracle::new(&truth, ch.q0);
    let rt = oracle.r2_turb(&ch).sqrt();
    let mut checks = Vec::new();
    let stat = |r: f64, m: VarianceMethod| aperture_scintillation(&ch, &s, &ApertureConfig { radius: r }, m);
    push(
        &mut checks,
        "numeric sigma_eta^2 at R = 1e-4 r_T",
        stat(1e-4 * rt, VarianceMethod::Numeric),
        |st| Check::range("numeric sigma_eta^2 at R = 1e-4 r_T", 0.95, 1.0, st.sigma2),
    );
    for k in [3.0, 4.0, 5.0] {
        let name = format!("numeric vs delta sigma_eta^2 at R = {k} r_T");
        let both = stat(k * rt, VarianceMethod::Numeric)
            .and_then(|n| stat(k * rt, VarianceMethod::Delta).map(|d| (n.sigma2, d.sigma2)));
        push(&mut checks, &name, both, |(n, d)| Check::relative(&name, d, n, 0.05));
    }
    let limit = 4.0 / (oracle.q2_turb(&ch) * oracle.r2_turb(&ch));
    let name = "delta variance at R = 10 r_T";
    push(
        &mut checks,
        name,
        transmittance_variance_delta(&ch, &s, &ApertureConfig { radius: 10.0 * rt }),
        |v| Check::relative(name, limit, v, 1e-8),
    );
    checks
}

fn criterion_6(opts: &ValidationOptions) -> Vec<Check> {
    let ch_a = reference_channel();
    let spec_a = reference_spectrum();
    let ch_b = ch_a.at_distance(100_000.0);
    let spec_b = TurbulenceSpectrum { cn2: 2.5e-16, ..spec_a };
    let oa = Oracle::new(&spec_a, ch_a.q0);
    let ob = Oracle::new(&spec_b, ch_b.q0);
    let predicted = (oa.q2_turb(&ch_a) * oa.r2_turb(&ch_a)) / (ob.q2_turb(&ch_b) * ob.r2_turb(&ch_b));
    let large = |ch: &BeamChannel, s: &TurbulenceSpectrum, o: &Oracle| {
        let r = 5.0 * o.r2_turb(ch).sqrt();
        aperture_scintillation(
            ch,
            &s.scaled(opts.alpha_scale),
            &ApertureConfig { radius: r },
            VarianceMethod::Numeric,
        )
    };
    let mut checks = Vec::new();
    let ratio = large(&ch_b, &spec_b, &ob).and_then(|b| large(&ch_a, &spec_a, &oa).map(|a| b.sigma2 / a.sigma2));
    let name = "sigma_eta^2 ratio (100 km, 2.5e-16) / (20 km, 2.5e-14) at R = 5 r_T";
    push(&mut checks, name, ratio, |r| {
        let mut c = Check::relative(name, predicted, r, 0.10);
        if r <= 1.0 {
            c.passed = false;
        }
        c
    });
    checks
}

fn criterion_7(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let truth = reference_spectrum();
    let s = truth.scaled(opts.alpha_scale);
    let oracle = Oracle::new(&truth, ch.q0);
    let mut checks = Vec::new();
    let provider = match AsymptoticSlices::new(&ch, &s, PdfModel::MomentConsistent) {
        Ok(p) => p,
        Err(e) => {
            checks.push(Check::failed("asymptotic slices", e));
            return checks;
        }
    };
    let l = (8.0 / oracle.q2_turb(&ch)).sqrt();
    let rt = oracle.r2_turb(&ch).sqrt();
    let center = Vec2::new(0.4 * rt, -0.3 * rt);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..10 {
        for j in 0..10 {
            let r = center + Vec2::new(1.0, 0.3) * ((i as f64 - 4.5) * 0.35 * l);
            let rp = center + Vec2::new(0.2, 1.0) * ((j as f64 - 4.5) * 0.35 * l);
            let g = gamma4_general(&provider, r, rp);
            let c = gamma4_closed(&ch, &s, r, rp, PdfModel::MomentConsistent);
            match (g, c) {
                (Ok(g), Ok(c)) => {
                    worst = worst.max((g.correlation_term / c.correlation_term - 1.0).abs());
                    worst = worst.max((g.mean_product / c.mean_product - 1.0).abs());
                }
                (Err(e), _) | (_, Err(e)) => failure = Some(e),
            }
        }
    }
    match failure {
        Some(e) => checks.push(Check::failed("general vs closed fourth moment, 10x10 pairs", e)),
        None => checks.push(Check::at_most(
            "general vs closed fourth moment, 10x10 pairs",
            worst,
            0.01,
        )),
    }

    let boundary = quantum_classical_boundary(&ch, &s);
    match boundary {
        Ok(b) => match b.radius {
            Some(rq) => {
                let name = "classical/shot at r_q";
                push(
                    &mut checks,
                    name,
                    fluctuation_correlation(&ch, &s, Vec2::new(rq, 0.0)),
                    |fc| Check::relative(name, 1.0, fc.classical_coefficient / fc.shot, 1e-10),
                );
                checks.push(Check::relative(
                    "lambda_q = sqrt(pi/2) a",
                    (PI / 2.0).sqrt() * b.cell_size,
                    b.lambda_q,
                    4.0 * f64::EPSILON,
                ));
            }
            None => checks.push(Check::failed("quantum/classical boundary", "no boundary at N = 1e8")),
        },
        Err(e) => checks.push(Check::failed("quantum/classical boundary", e)),
    }
    checks
}

fn criterion_8(opts: &ValidationOptions) -> Vec<Check> {
    let ch = reference_channel();
    let s = reference_spectrum().scaled(opts.alpha_scale);
    let vk = TurbulenceSpectrum {
        cn2: 2.5e-16 * opts.alpha_scale,
        inner_scale: 1e-3,
        outer_scale: Some(10.0),
    };
    let mut checks = Vec::new();
    let runs = [
        ("random force", McModel::Force, ch, s, vec![5_000.0, 20_000.0]),
        (
            "collision",
            McModel::Collision,
            ch.at_distance(1_000.0),
            vk,
            vec![300.0, 1_000.0],
        ),
    ];
    for (label, model, channel, spec, zs) in runs {
        let render = |workers: usize| -> Result<String> {
            let mut cfg = McConfig::new(20_000, opts.seed, model, zs.clone());
            cfg.worker_hint = workers;
            cfg.histograms = true;
            let out = simulate(&cfg, &channel, &spec)?;
            let mut text = format_moments_csv(&out);
            for h in &out.histograms {
                text.push_str(&format_histogram_csv(h));
            }
            Ok(text)
        };
        let name = format!("{label} output identical for 1, 4, 8 workers and a repeat");
        let outputs: Result<Vec<String>> = [1, 4, 8, 1].into_iter().map(render).collect();
        push(&mut checks, &name, outputs, |o| {
            let differing = o.iter().filter(|x| **x != o[0]).count();
            Check::absolute(&name, 0.0, differing as f64, 0.0)
        });
    }
    checks
}

/// Runs one criterion by number (1–8).
pub fn run_criterion(id: u8, opts: &ValidationOptions) -> CriterionResult {
    let start = Instant::now();
    let checks = match id {
        1 => criterion_1(opts),
        2 => criterion_2(opts),
        3 => criterion_3(opts),
        4 => criterion_4(opts),
        5 => criterion_5(opts),
        6 => criterion_6(opts),
        7 => criterion_7(opts),
        8 => criterion_8(opts),
        _ => vec![Check::failed("criterion", format!("unknown criterion {id}"))],
    };
    let title = CRITERIA.iter().find(|(i, _)| *i == id).map_or("unknown", |(_, t)| t);
    CriterionResult {
        id,
        title,
        passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}

pub fn validate_all(opts: &ValidationOptions) -> ValidationReport {
    let criteria: Vec<CriterionResult> = CRITERIA.iter().map(|(id, _)| run_criterion(*id, opts)).collect();
    ValidationReport {
        alpha_scale: opts.alpha_scale,
        passed: criteria.iter().all(|c| c.passed),
        criteria,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_alpha_matches_library() {
        let s = reference_spectrum();
        let a = crate::turbulence::alpha_closed_tatarskii(&s, 1e7).unwrap();
        assert!((Oracle::new(&s, 1e7).alpha / a - 1.0).abs() < 1e-14);
        assert!((Oracle::new(&s, 1e7).alpha / 6_793_792_198.021_342 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quick_criteria_pass() {
        let opts = ValidationOptions::default();
        for id in [1, 2, 4, 7] {
            let r = run_criterion(id, &opts);
            assert!(r.passed, "{r:#?}");
        }
    }

    #[test]
    fn alpha_fault_is_detected() {
        let opts = ValidationOptions {
            alpha_scale: 1.05,
            ..ValidationOptions::default()
        };
        let r = run_criterion(2, &opts);
        assert!(!r.passed);
        assert!(!r.checks[0].passed && !r.checks[1].passed);
        assert!(!run_criterion(1, &opts).passed);
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(!run_criterion(9, &ValidationOptions::default()).passed);
    }
}
