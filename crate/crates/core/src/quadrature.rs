//! One-dimensional quadrature: globally adaptive Gauss–Kronrod (10/21 point),
//! breakpoint and semi-infinite variants, spectrally convergent trapezoid
//! rules for periodic integrands, and fixed-order Gauss–Legendre rules.
//!
//! The multidimensional integrals in this crate are all reduced to nested
//! calls of these routines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Smallest absolute tolerance ever requested; keeps underflowing integrands
/// from driving the subdivision forever.
pub const ABS_FLOOR: f64 = 1e-300;

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_500_356_777_855,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights belonging to XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Tolerances and budget for the adaptive integrators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: ABS_FLOOR,
            rel_tol: 1e-10,
            max_intervals: 2000,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn with_abs(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }

    pub fn with_max_intervals(mut self, n: usize) -> Self {
        self.max_intervals = n;
        self
    }

    fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value.abs()).max(ABS_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Applies the 21-point Kronrod rule on `[a, b]`, returning the Kronrod value
/// and |Kronrod − Gauss| as the error estimate.
fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[10] * fc;
    let mut gauss = 0.0;
    for j in 0..10 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    (value, error)
}

/// Integrates `f` over `[a, b]` to the requested tolerance.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<QuadResult> {
    integrate_with_breaks(f, &[a, b], opts)
}

/// Integrates `f` over `[points[0], points[last]]`, starting from the
/// subdivision given by the (sorted) breakpoints.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(mut f: F, points: &[f64], opts: &QuadOptions) -> Result<QuadResult> {
    if points.len() < 2 {
        return Err(Error::Domain("quadrature needs at least two breakpoints".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::Domain("quadrature breakpoints must be finite".into()));
    }
    let mut heap = BinaryHeap::new();
    let mut value = 0.0;
    let mut error = 0.0;
    let mut evaluations = 0;
    for w in points.windows(2) {
        if w[1] == w[0] {
            continue;
        }
        if w[1] < w[0] {
            return Err(Error::Domain("quadrature breakpoints must be sorted".into()));
        }
        let (v, e) = gk21(&mut f, w[0], w[1]);
        evaluations += 21;
        value += v;
        error += e;
        heap.push(Segment {
            a: w[0],
            b: w[1],
            value: v,
            error: e,
        });
    }
    if !value.is_finite() {
        return Err(Error::Domain("non-finite integrand".into()));
    }

    while error > opts.target(value) {
        if heap.len() >= opts.max_intervals {
            return Err(Error::Quadrature {
                value,
                error,
                requested: opts.target(value),
            });
        }
        let Some(worst) = heap.pop() else { break };
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval cannot be split further in floating point
            heap.push(worst);
            return Err(Error::Quadrature {
                value,
                error,
                requested: opts.target(value),
            });
        }
        let (v1, e1) = gk21(&mut f, worst.a, mid);
        let (v2, e2) = gk21(&mut f, mid, worst.b);
        evaluations += 42;
        value += v1 + v2 - worst.value;
        error += e1 + e2 - worst.error;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
        if !value.is_finite() {
            return Err(Error::Domain("non-finite integrand".into()));
        }
    }

    // Re-sum from the segments to shed accumulated update round-off.
    let mut segments: Vec<Segment> = heap.into_vec();
    segments.sort_by(|x, y| x.a.total_cmp(&y.a));
    let value = segments.iter().map(|s| s.value).sum();
    let error = segments.iter().map(|s| s.error).sum();
    Ok(QuadResult {
        value,
        error,
        evaluations,
    })
}

/// Integrates `f` over `[a, ∞)` using the map x = a + t/(1 − t).
pub fn integrate_semi_infinite<F: FnMut(f64) -> f64>(mut f: F, a: f64, opts: &QuadOptions) -> Result<QuadResult> {
    integrate(
        |t| {
            if t >= 1.0 {
                return 0.0;
            }
            let one_minus = 1.0 - t;
            let x = a + t / one_minus;
            let v = f(x) / (one_minus * one_minus);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        opts,
    )
}

/// Trapezoid rule over one period of a smooth periodic function, doubling the
/// node count until successive estimates agree.
///
/// Converges geometrically for analytic periodic integrands.
pub fn periodic_trapezoid<F: FnMut(f64) -> f64>(
    mut f: F,
    start: f64,
    period: f64,
    opts: &QuadOptions,
    initial_points: usize,
) -> Result<QuadResult> {
    let mut n = initial_points.max(4);
    let mut h = period / n as f64;
    let mut sum: f64 = (0..n).map(|j| f(start + j as f64 * h)).sum();
    let mut estimate = sum * h;
    let mut evaluations = n;
    let max_points = opts.max_intervals.max(8) * 21;
    loop {
        // add the midpoints
        let mids: f64 = (0..n).map(|j| f(start + (j as f64 + 0.5) * h)).sum();
        evaluations += n;
        sum += mids;
        n *= 2;
        h *= 0.5;
        let refined = sum * h;
        let error = (refined - estimate).abs();
        estimate = refined;
        if error <= opts.target(refined) {
            return Ok(QuadResult {
                value: refined,
                error,
                evaluations,
            });
        }
        if 2 * n > max_points {
            return Err(Error::Quadrature {
                value: refined,
                error,
                requested: opts.target(refined),
            });
        }
    }
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess followed by Newton iteration on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    let d = n * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre rule: `panels` equal panels of `order` nodes on
/// `[a, b]`. Returns (nodes, weights) ready for a weighted sum.
pub fn composite_gauss_legendre(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            nodes.push(lo + 0.5 * h * (xi + 1.0));
            weights.push(0.5 * h * wi);
        }
    }
    (nodes, weights)
}

/// Breakpoints in ln(x) covering `[lo, hi]`: one per decade plus the
/// given scale marks, so that no rule straddles several scales.
pub fn log_breaks(lo: f64, hi: f64, marks: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = marks.iter().copied().filter(|&m| m > lo && m < hi).collect();
    let mut d = lo.log10().floor() + 1.0;
    while 10f64.powf(d) < hi {
        pts.push(10f64.powf(d));
        d += 1.0;
    }
    pts.push(lo);
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a / *b - 1.0).abs() < 1e-12);
    pts.into_iter().map(f64::ln).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn kronrod_weights_sum_to_two() {
        let k: f64 = 2.0 * WGK[..10].iter().sum::<f64>() + WGK[10];
        let g: f64 = 2.0 * WG.iter().sum::<f64>();
        assert!((k - 2.0).abs() < 1e-15);
        assert!((g - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kronrod_rule_is_exact_for_degree_31() {
        let mut f = |x: f64| x.powi(30) + x.powi(31);
        let (v, _) = gk21(&mut f, -1.0, 1.0);
        assert!((v - 2.0 / 31.0).abs() < 1e-15);
        let mut g = |x: f64| x.powi(18);
        let (v, e) = gk21(&mut g, -1.0, 1.0);
        assert!((v - 2.0 / 19.0).abs() < 1e-15);
        // the embedded Gauss rule is exact to degree 19 as well
        assert!(e < 1e-15);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = integrate(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, &QuadOptions::rel(1e-10)).unwrap();
        assert!((r.value - 2.0).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn breakpoints_and_oscillation() {
        let pts: Vec<f64> = (0..=20).map(|k| k as f64 * PI).collect();
        let r = integrate_with_breaks(|x: f64| x.sin().powi(2), &pts, &QuadOptions::rel(1e-12)).unwrap();
        assert!((r.value - 10.0 * PI).abs() < 1e-10);
    }

    #[test]
    fn semi_infinite_gaussian() {
        let r = integrate_semi_infinite(|x: f64| (-x * x).exp(), 0.0, &QuadOptions::rel(1e-11)).unwrap();
        assert!((r.value - PI.sqrt() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn budget_exhaustion_reports_estimate() {
        let err = integrate(
            |x: f64| (1.0 / x).sin(),
            1e-9,
            1.0,
            &QuadOptions::rel(1e-14).with_max_intervals(10),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Quadrature { .. }));
    }

    #[test]
    fn periodic_trapezoid_is_spectral() {
        // (1/2π)∫ exp(cos θ) dθ = I0(1)
        let r = periodic_trapezoid(|t: f64| t.cos().exp(), 0.0, 2.0 * PI, &QuadOptions::rel(1e-14), 4).unwrap();
        assert!((r.value / (2.0 * PI) - 1.266_065_877_752_008_3).abs() < 1e-14);
        assert!(r.evaluations <= 64);
    }

    #[test]
    fn gauss_legendre_nodes() {
        for n in [1, 2, 5, 10, 33] {
            let (x, w) = gauss_legendre(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-13);
            // exact for x^(2n-2)
            let m = 2 * n - 2;
            let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(m as i32)).sum();
            assert!((v - 2.0 / (m as f64 + 1.0)).abs() < 1e-13, "n = {n}");
        }
    }
}
