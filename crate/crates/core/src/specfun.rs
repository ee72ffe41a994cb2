//! Special functions: Γ(x), the fixed-parameter Kummer function
//! ₁F₁(−5/6, 1; −u), and the Bessel functions I₀ and J₀.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// sin(πx) with exact zeros at the integers.
pub fn sin_pi(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    // r in [0, 2)
    let (r, sign) = if r > 1.0 { (r - 1.0, -1.0) } else { (r, 1.0) };
    let r = if r > 0.5 { 1.0 - r } else { r };
    sign * (PI * r).sin()
}

/// The gamma function, Lanczos approximation with reflection below 1/2.
pub fn gamma_fn(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("gamma of non-finite argument {x}")));
    }
    if x <= 0.0 && x == x.floor() {
        return Err(Error::GammaPole(x));
    }
    Ok(gamma_unchecked(x))
}

fn gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        return PI / (sin_pi(x) * gamma_unchecked(1.0 - x));
    }
    let x = x - 1.0;
    let mut sum = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let w = x + LANCZOS_G + 0.5;
    // split the power to keep it in range for large x
    let half = w.powf(0.5 * (x + 0.5));
    (2.0 * PI).sqrt() * half * (-w).exp() * half * sum
}

const KUMMER_A: f64 = -5.0 / 6.0;

/// Switch point between the convergent and asymptotic Kummer evaluations.
pub const KUMMER_SWITCH: f64 = 30.0;

fn gamma_11_6() -> f64 {
    static G: OnceLock<f64> = OnceLock::new();
    *G.get_or_init(|| gamma_unchecked(11.0 / 6.0))
}

/// ₁F₁(−5/6, 1; −u) for u ≥ 0.
pub fn kummer_m(u: f64) -> Result<f64> {
    check_kummer_arg(u)?;
    if u <= 1.0 {
        Ok(1.0 + kummer_small(u))
    } else if u <= KUMMER_SWITCH {
        Ok(kummer_transformed(u))
    } else {
        Ok(kummer_asymptotic(u))
    }
}

/// ₁F₁(−5/6, 1; −u) − 1, free of cancellation for small u.
pub fn kummer_m_minus_one(u: f64) -> Result<f64> {
    check_kummer_arg(u)?;
    if u <= 1.0 {
        Ok(kummer_small(u))
    } else {
        Ok(kummer_m(u)? - 1.0)
    }
}

fn check_kummer_arg(u: f64) -> Result<()> {
    if u.is_nan() || u < 0.0 {
        return Err(Error::Domain(format!("kummer_m needs u >= 0, got {u}")));
    }
    if u.is_infinite() {
        return Err(Error::Domain("kummer_m of infinite argument".into()));
    }
    Ok(())
}

// Σ_{n≥1} (a)_n (−u)^n / (n!)², alternating and rapidly convergent for u ≤ 1.
fn kummer_small(u: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 0..200 {
        let nf = n as f64;
        term *= (KUMMER_A + nf) * (-u) / ((nf + 1.0) * (nf + 1.0));
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

// Kummer's transformation: M(a, 1, −u) = e^(−u) M(1 − a, 1, u), positive terms.
fn kummer_transformed(u: f64) -> f64 {
    let b = 1.0 - KUMMER_A;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..1000 {
        let nf = n as f64;
        term *= (b + nf) * u / ((nf + 1.0) * (nf + 1.0));
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    (-u).exp() * sum
}

// u^(5/6)/Γ(11/6) Σ_s ((a)_s)² u^(−s) / s!, truncated at the smallest term.
fn kummer_asymptotic(u: f64) -> f64 {
    let mut term = 1.0_f64;
    let mut sum = 1.0;
    for s in 0..200 {
        let sf = s as f64;
        let next = term * (KUMMER_A + sf) * (KUMMER_A + sf) / ((sf + 1.0) * u);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    u.powf(-KUMMER_A) / gamma_11_6() * sum
}

/// Modified Bessel function I₀(x).
pub fn bessel_i0(x: f64) -> Result<f64> {
    check_nonneg("bessel_i0", x)?;
    if x <= 30.0 {
        Ok(i0_series(x))
    } else {
        Ok(x.exp() * i0_asymptotic_scaled(x))
    }
}

/// Exponentially scaled I₀: e^(−x)·I₀(x), finite for all x ≥ 0.
pub fn bessel_i0_scaled(x: f64) -> Result<f64> {
    check_nonneg("bessel_i0_scaled", x)?;
    if x <= 30.0 {
        Ok((-x).exp() * i0_series(x))
    } else {
        Ok(i0_asymptotic_scaled(x))
    }
}

fn check_nonneg(name: &str, x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("{name} needs x >= 0, got {x}")));
    }
    Ok(())
}

fn i0_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..500 {
        let mf = m as f64;
        term *= y / (mf * mf);
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    sum
}

fn i0_asymptotic_scaled(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    let mut term = 1.0_f64;
    let mut sum = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = term * odd * odd / (8.0 * kf * x);
        if next >= term {
            break;
        }
        term = next;
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    sum / (2.0 * PI * x).sqrt()
}

const J0_TRAPEZOID_POINTS: usize = 64;
const J0_ASYMPTOTIC_FROM: f64 = 25.0;

// sin θ_j on the quarter period of a 64-point grid, with symmetry weights.
fn j0_nodes() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let quarter = J0_TRAPEZOID_POINTS / 4;
        (0..=quarter)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / J0_TRAPEZOID_POINTS as f64;
                let w = if j == 0 || j == quarter { 2.0 } else { 4.0 };
                (theta.sin(), w / J0_TRAPEZOID_POINTS as f64)
            })
            .collect()
    })
}

/// Bessel function J₀(x) for real x.
pub fn bessel_j0(x: f64) -> f64 {
    let x = x.abs();
    if x > J0_ASYMPTOTIC_FROM {
        return j0_hankel(x);
    }
    j0_nodes().iter().map(|&(s, w)| w * (x * s).cos()).sum()
}

/// 1 − J₀(x), accurate for small arguments.
pub fn one_minus_j0(x: f64) -> f64 {
    let x = x.abs();
    if x >= 1.0 {
        return 1.0 - bessel_j0(x);
    }
    let y = -0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 0.0;
    for m in 1..40 {
        let mf = m as f64;
        term *= y / (mf * mf);
        sum -= term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

fn j0_hankel(x: f64) -> f64 {
    // P and Q series of the Hankel expansion, truncated at the smallest term
    let mut p = 1.0;
    let mut q = 0.0;
    let mut a = 1.0_f64;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = a * odd * odd / (8.0 * kf * x);
        if next >= a {
            break;
        }
        a = next;
        match k % 4 {
            1 => q += a,
            2 => p -= a,
            3 => q -= a,
            _ => p += a,
        }
        if a < 1e-17 {
            break;
        }
    }
    let chi = x - 0.25 * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() + q * chi.sin())
}
