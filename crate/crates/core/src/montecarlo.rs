//! Particle simulation of the two kinetic pictures: photons drifting with
//! velocity c·q/q₀ and either scattering on eddies at discrete events
//! (collision model) or diffusing in momentum under a delta-correlated
//! random force.
//!
//! The ensemble is split into fixed blocks of photons; each block draws
//! from its own ChaCha8 stream selected by the block index, and block
//! results are merged in index order. Output is therefore independent of
//! the number of worker threads.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kinetics::RelaxationRate;
use crate::moments::{diffraction_r2, mean_r2_closed, turbulent_moments};
use crate::quadrature::QuadOptions;
use crate::turbulence::{alpha_best, BeamChannel, KickSampler, TurbulenceSpectrum};
use crate::vec2::Vec2;
use crate::SPEED_OF_LIGHT;

/// Photons per RNG block.
pub const BLOCK_SIZE: usize = 4096;
/// Histogram cells per axis.
pub const HISTOGRAM_CELLS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Photon {
    pub r: Vec2,
    pub q: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McModel {
    Collision,
    #[serde(alias = "random-force", alias = "randomforce")]
    Force,
}

impl fmt::Display for McModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McModel::Collision => "collision",
            McModel::Force => "force",
        })
    }
}

impl FromStr for McModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "collision" => Ok(McModel::Collision),
            "force" | "random-force" | "randomforce" => Ok(McModel::Force),
            other => Err(invalid("model", format!("expected collision or force, got {other:?}"))),
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_photons_sim: usize,
    pub seed: u64,
    pub model: McModel,
    /// Propagation distances z = ct at which the ensemble is sampled, m.
    pub sample_distances: Vec<f64>,
    #[serde(default = "default_workers")]
    pub worker_hint: usize,
    #[serde(default)]
    pub histograms: bool,
    /// Independent realisations for the intensity covariance.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

impl McConfig {
    pub fn new(n_photons_sim: usize, seed: u64, model: McModel, sample_distances: Vec<f64>) -> Self {
        Self {
            n_photons_sim,
            seed,
            model,
            sample_distances,
            worker_hint: 1,
            histograms: false,
            runs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_photons_sim == 0 {
            return Err(invalid("n_photons_sim", "must be >= 1"));
        }
        if self.worker_hint == 0 {
            return Err(invalid("worker_hint", "must be >= 1"));
        }
        if self.sample_distances.is_empty() {
            return Err(invalid("sample_distances", "need at least one sample distance"));
        }
        if self.sample_distances.iter().any(|z| !(z.is_finite() && *z >= 0.0)) {
            return Err(invalid("sample_distances", "distances must be finite and >= 0"));
        }
        if self.sample_distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("sample_distances", "must be strictly increasing"));
        }
        Ok(())
    }
}

/// Source ensemble: r and q independent Gaussians with ⟨r²⟩ = r₀²/2 and
/// ⟨q²⟩ = 2/r₀².
pub fn init_source<R: Rng + ?Sized>(channel: &BeamChannel, n: usize, rng: &mut R) -> Vec<Photon> {
    (0..n).map(|_| source_photon(channel.r0, rng)).collect()
}

fn source_photon<R: Rng + ?Sized>(r0: f64, rng: &mut R) -> Photon {
    let sr = 0.5 * r0;
    let sq = 1.0 / r0;
    let mut g = || rng.sample::<f64, _>(StandardNormal);
    let r = Vec2::new(sr * g(), sr * g());
    let q = Vec2::new(sq * g(), sq * g());
    Photon { r, q }
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct MomentAccumulator {
    count: u64,
    q2: Neumaier,
    q4: Neumaier,
    r2: Neumaier,
    r4: Neumaier,
    rq: Neumaier,
    rq2: Neumaier,
}

impl MomentAccumulator {
    fn push(&mut self, p: &Photon) {
        let q2 = p.q.norm_sq();
        let r2 = p.r.norm_sq();
        let rq = p.r.dot(p.q);
        self.count += 1;
        self.q2.add(q2);
        self.q4.add(q2 * q2);
        self.r2.add(r2);
        self.r4.add(r2 * r2);
        self.rq.add(rq);
        self.rq2.add(rq * rq);
    }

    fn merge(&mut self, o: &Self) {
        self.count += o.count;
        for (a, b) in [
            (&mut self.q2, &o.q2),
            (&mut self.q4, &o.q4),
            (&mut self.r2, &o.r2),
            (&mut self.r4, &o.r4),
            (&mut self.rq, &o.rq),
            (&mut self.rq2, &o.rq2),
        ] {
            a.add(b.sum);
            a.add(b.comp);
        }
    }

    fn finish(&self, z: f64) -> MomentSample {
        let n = self.count as f64;
        let stat = |s: &Neumaier, s2: &Neumaier| -> (f64, f64) {
            let m = s.value() / n;
            let var = (s2.value() / n - m * m).max(0.0);
            let se = if self.count > 1 {
                (var / (n - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            (m, se)
        };
        let (mean_q2, se_q2) = stat(&self.q2, &self.q4);
        let (mean_r2, se_r2) = stat(&self.r2, &self.r4);
        let (mean_rq, se_rq) = stat(&self.rq, &self.rq2);
        MomentSample {
            z,
            count: self.count,
            mean_q2,
            se_q2,
            mean_r2,
            se_r2,
            mean_rq,
            se_rq,
        }
    }
}

/// Ensemble moments at one sample distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSample {
    pub z: f64,
    pub count: u64,
    pub mean_q2: f64,
    pub se_q2: f64,
    pub mean_r2: f64,
    pub se_r2: f64,
    pub mean_rq: f64,
    pub se_rq: f64,
}

/// Photon counts on a square grid centred on the axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub z: f64,
    /// Half side of the square, m.
    pub half_extent: f64,
    pub cells: usize,
    /// Row-major counts, index `iy * cells + ix`.
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(z: f64, half_extent: f64) -> Self {
        Self {
            z,
            half_extent,
            cells: HISTOGRAM_CELLS,
            counts: vec![0; HISTOGRAM_CELLS * HISTOGRAM_CELLS],
        }
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.half_extent / self.cells as f64
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec2 {
        let h = self.cell_width();
        Vec2::new(
            -self.half_extent + (ix as f64 + 0.5) * h,
            -self.half_extent + (iy as f64 + 0.5) * h,
        )
    }

    fn push(&mut self, r: Vec2) {
        let h = self.cell_width();
        let fx = (r.x + self.half_extent) / h;
        let fy = (r.y + self.half_extent) / h;
        if fx >= 0.0 && fy >= 0.0 && fx < self.cells as f64 && fy < self.cells as f64 {
            self.counts[fy as usize * self.cells + fx as usize] += 1;
        }
    }

    fn merge(&mut self, o: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalised radial profile over `bins` rings out to the half extent.
    pub fn radial_profile(&self, bins: usize) -> Vec<f64> {
        let mut out = vec![0.0; bins];
        for iy in 0..self.cells {
            for ix in 0..self.cells {
                let c = self.counts[iy * self.cells + ix];
                if c == 0 {
                    continue;
                }
                let r = self.cell_center(ix, iy).norm();
                let b = (r / self.half_extent * bins as f64) as usize;
                if b < bins {
                    out[b] += c as f64;
                }
            }
        }
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            for v in &mut out {
                *v /= total;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McOutput {
    pub model: McModel,
    pub samples: Vec<MomentSample>,
    pub histograms: Vec<Histogram>,
}

enum Propagator {
    Collision {
        sampler: KickSampler,
        /// Scattering events per metre of propagation.
        rate_per_m: f64,
        q0: f64,
    },
    Force {
        alpha: f64,
        q0: f64,
    },
    Free {
        q0: f64,
    },
}

impl Propagator {
    fn new(model: McModel, channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<Self> {
        let q0 = channel.q0;
        if spectrum.cn2 == 0.0 {
            return Ok(Propagator::Free { q0 });
        }
        match model {
            McModel::Collision => {
                if spectrum.is_tatarskii() {
                    return Err(Error::Incompatible(
                        "the collision model needs a finite total scattering rate (set an outer scale)".into(),
                    ));
                }
                let sampler = KickSampler::new(spectrum)?;
                // ν = (4π²c q₀²)·∫kψ dk = 2π c q₀² ∫ψ d²k
                let nu = 2.0 * PI * SPEED_OF_LIGHT * q0 * q0 * sampler.total_weight();
                Ok(Propagator::Collision {
                    sampler,
                    rate_per_m: nu / SPEED_OF_LIGHT,
                    q0,
                })
            }
            McModel::Force => Ok(Propagator::Force {
                alpha: alpha_best(spectrum, q0)?,
                q0,
            }),
        }
    }

    fn advance<R: Rng + ?Sized>(&self, p: &mut Photon, dz: f64, rng: &mut R) {
        if dz <= 0.0 {
            return;
        }
        match self {
            Propagator::Free { q0 } => {
                p.r += p.q * (dz / q0);
            }
            Propagator::Collision {
                sampler,
                rate_per_m,
                q0,
            } => {
                let mut left = dz;
                loop {
                    let step = rng.sample::<f64, _>(Exp1) / rate_per_m;
                    if step >= left {
                        p.r += p.q * (left / q0);
                        break;
                    }
                    p.r += p.q * (step / q0);
                    p.q += sampler.sample(rng);
                    left -= step;
                }
            }
            Propagator::Force { alpha, q0 } => {
                // exact joint Gaussian of (ΔW, ∫W) for Brownian q over Δt
                let dt = dz / SPEED_OF_LIGHT;
                let sw = (2.0 * alpha * dt).sqrt();
                let si = (alpha * dt.powi(3) / 6.0).sqrt();
                let mut g = || rng.sample::<f64, _>(StandardNormal);
                let dw = Vec2::new(sw * g(), sw * g());
                let int_w = dw * (0.5 * dt) + Vec2::new(si * g(), si * g());
                p.r += (p.q * dt + int_w) * (SPEED_OF_LIGHT / q0);
                p.q += dw;
            }
        }
    }
}

struct BlockResult {
    moments: Vec<MomentAccumulator>,
    histograms: Vec<Histogram>,
}

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

fn run_block(
    block: usize,
    config: &McConfig,
    channel: &BeamChannel,
    prop: &Propagator,
    extents: &[f64],
) -> BlockResult {
    let start = block * BLOCK_SIZE;
    let n = BLOCK_SIZE.min(config.n_photons_sim - start);
    let mut rng = block_rng(config.seed, block as u64);
    let zs = &config.sample_distances;
    let mut moments = vec![MomentAccumulator::default(); zs.len()];
    let mut histograms: Vec<Histogram> = if config.histograms {
        zs.iter().zip(extents).map(|(&z, &e)| Histogram::new(z, e)).collect()
    } else {
        Vec::new()
    };
    for _ in 0..n {
        let mut p = source_photon(channel.r0, &mut rng);
        let mut z = 0.0;
        for (i, &zs_i) in zs.iter().enumerate() {
            prop.advance(&mut p, zs_i - z, &mut rng);
            z = zs_i;
            moments[i].push(&p);
            if let Some(h) = histograms.get_mut(i) {
                h.push(p.r);
            }
        }
    }
    BlockResult { moments, histograms }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the particle simulation and returns moments (and optionally
/// histograms) at each sample distance.
pub fn simulate(config: &McConfig, channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<McOutput> {
    config.validate()?;
    channel.validate()?;
    spectrum.validate()?;
    let prop = Propagator::new(config.model, channel, spectrum)?;
    let extents: Vec<f64> = config
        .sample_distances
        .iter()
        .map(|&z| {
            let r2 = if z == 0.0 {
                diffraction_r2(&channel.at_distance(0.0))
            } else {
                mean_r2_closed(&channel.at_distance(z), spectrum)?
            };
            Ok(4.0 * r2.sqrt())
        })
        .collect::<Result<_>>()?;
    let blocks = config.n_photons_sim.div_ceil(BLOCK_SIZE);
    let results: Vec<BlockResult> = with_pool(config.worker_hint, || {
        (0..blocks)
            .into_par_iter()
            .map(|b| run_block(b, config, channel, &prop, &extents))
            .collect()
    })?;

    let zs = &config.sample_distances;
    let mut moments = vec![MomentAccumulator::default(); zs.len()];
    let mut histograms: Vec<Histogram> = if config.histograms {
        zs.iter().zip(&extents).map(|(&z, &e)| Histogram::new(z, e)).collect()
    } else {
        Vec::new()
    };
    for r in &results {
        for (m, b) in moments.iter_mut().zip(&r.moments) {
            m.merge(b);
        }
        for (h, b) in histograms.iter_mut().zip(&r.histograms) {
            h.merge(b);
        }
    }
    Ok(McOutput {
        model: config.model,
        samples: moments.iter().zip(zs).map(|(m, &z)| m.finish(z)).collect(),
        histograms,
    })
}

/// Moment-series CSV with header.
pub fn format_moments_csv(output: &McOutput) -> String {
    let mut s = String::from("z,count,mean_q2,se_q2,mean_r2,se_r2,mean_rq,se_rq\n");
    for m in &output.samples {
        s.push_str(&format!(
            "{:e},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            m.z, m.count, m.mean_q2, m.se_q2, m.mean_r2, m.se_r2, m.mean_rq, m.se_rq
        ));
    }
    s
}

/// Histogram CSV (ix, iy, count), nonzero cells only.
pub fn format_histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("ix,iy,count\n");
    for iy in 0..h.cells {
        for ix in 0..h.cells {
            let c = h.counts[iy * h.cells + ix];
            if c > 0 {
                s.push_str(&format!("{ix},{iy},{c}\n"));
            }
        }
    }
    s
}

/// Comparison of the collision and random-force models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub z: f64,
    pub nu_t: f64,
    pub collision: MomentSample,
    pub force: MomentSample,
    /// |Δ⟨q²⟩|/⟨q²⟩_force.
    pub rel_diff_q2: f64,
    pub rel_diff_r2: f64,
    /// Allowed relative difference max(3 SE, 2%) for each moment.
    pub allowed_q2: f64,
    pub allowed_r2: f64,
    /// L¹ distance of the normalised radial profiles.
    pub radial_l1: f64,
    /// Relative gap between the exact exposure and its quadratic form at
    /// small argument.
    pub kernel_identity_residual: f64,
    pub warnings: Vec<String>,
}

impl EquivalenceReport {
    pub fn moments_agree(&self) -> bool {
        self.rel_diff_q2 <= self.allowed_q2 && self.rel_diff_r2 <= self.allowed_r2
    }
}

/// Runs both models on the same channel and compares the end-point moments.
pub fn equivalence_check(
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    n: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if spectrum.is_tatarskii() {
        return Err(Error::Incompatible("the equivalence check needs an outer scale".into()));
    }
    let nu = crate::turbulence::nu(spectrum, channel.q0)?;
    let nu_t = nu * channel.time();
    let mut warnings = Vec::new();
    if nu_t < 10.0 {
        warnings.push(format!("nu*t = {nu_t:.3} is below 10; the models need not agree"));
    }
    let mut cfg = McConfig::new(n, seed, McModel::Collision, vec![channel.z]);
    cfg.histograms = true;
    cfg.worker_hint = rayon::current_num_threads();
    let col = simulate(&cfg, channel, spectrum)?;
    cfg.model = McModel::Force;
    let frc = simulate(&cfg, channel, spectrum)?;
    let (c, f) = (col.samples[0], frc.samples[0]);
    let rel_q2 = (c.mean_q2 - f.mean_q2).abs() / f.mean_q2;
    let rel_r2 = (c.mean_r2 - f.mean_r2).abs() / f.mean_r2;
    let allow = |se1: f64, se2: f64, m: f64| (3.0 * (se1 * se1 + se2 * se2).sqrt() / m).max(0.02);
    let pc = col.histograms[0].radial_profile(64);
    let pf = frc.histograms[0].radial_profile(64);
    let radial_l1 = pc.iter().zip(&pf).map(|(a, b)| (a - b).abs()).sum();
    Ok(EquivalenceReport {
        z: channel.z,
        nu_t,
        collision: c,
        force: f,
        rel_diff_q2: rel_q2,
        rel_diff_r2: rel_r2,
        allowed_q2: allow(c.se_q2, f.se_q2, f.mean_q2),
        allowed_r2: allow(c.se_r2, f.se_r2, f.mean_r2),
        radial_l1,
        kernel_identity_residual: kernel_identity_residual(channel, spectrum)?,
        warnings,
    })
}

/// Compares ∫₀ᵗ γ(|p − k c t′/q₀|) dt′ against α·∫₀ᵗ |p − k c t′/q₀|² dt′
/// (the sin x → x form) on a path where |P| stays far below the inner
/// scale. Returns the relative gap.
pub fn kernel_identity_residual(channel: &BeamChannel, spectrum: &TurbulenceSpectrum) -> Result<f64> {
    let rate = RelaxationRate::exact(spectrum, channel.q0)?;
    let t = channel.time();
    let v = SPEED_OF_LIGHT / channel.q0;
    let scale = 1e-4 * spectrum.inner_scale;
    let p = Vec2::new(0.6 * scale, -0.3 * scale);
    // k chosen so that P(t) sweeps through the origin region
    let k = Vec2::new(0.5 * scale / (v * t), 0.4 * scale / (v * t));
    let exact = rate.time_integral(k, p, t, &QuadOptions::rel(1e-12))?;
    let quad = p.norm_sq() * t - p.dot(k) * v * t * t + k.norm_sq() * v * v * t.powi(3) / 3.0;
    let approx = rate.alpha() * quad;
    Ok((exact - approx).abs() / approx)
}

/// Cell-intensity statistics across independent realisations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceEstimate {
    pub cells: Vec<Vec2>,
    pub runs: usize,
    pub mean: Vec<f64>,
    /// Row-major covariance matrix.
    pub covariance: Vec<f64>,
    /// Standard error of each covariance entry.
    pub standard_error: Vec<f64>,
    /// e-fold distance fitted to cov(Δ)/cov(0) = exp(−Δ²/ℓ²) over the
    /// cells separated from the first one.
    pub decay_length: f64,
    /// √(8/⟨q²⟩_T).
    pub expected_decay_length: f64,
}

impl CovarianceEstimate {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.cells.len() + j]
    }
}

/// Estimates cov(Î(cell_i), Î(cell_j)) across `config.runs` realisations.
/// Each photon carries a Gaussian wave packet of width `packet_width`
/// with a random phase and its transverse wavevector; the cell intensity
/// is the squared modulus of the summed field at the cell centre.
pub fn intensity_covariance(
    config: &McConfig,
    channel: &BeamChannel,
    spectrum: &TurbulenceSpectrum,
    cells: &[Vec2],
    packet_width: f64,
) -> Result<CovarianceEstimate> {
    config.validate()?;
    if config.runs < 2 {
        return Err(invalid("runs", format!("need at least 2 runs, got {}", config.runs)));
    }
    if cells.is_empty() {
        return Err(invalid("cells", "need at least one cell"));
    }
    if !(packet_width.is_finite() && packet_width > 0.0) {
        return Err(invalid(
            "packet_width",
            format!("must be finite and > 0, got {packet_width}"),
        ));
    }
    let z_end = *config.sample_distances.last().expect("validated non-empty");
    let prop = Propagator::new(config.model, channel, spectrum)?;
    let reach = 6.0 * packet_width;
    let (lo, hi) = cells.iter().fold(
        (
            Vec2::new(f64::INFINITY, f64::INFINITY),
            Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        ),
        |(lo, hi), c| {
            (
                Vec2::new(lo.x.min(c.x), lo.y.min(c.y)),
                Vec2::new(hi.x.max(c.x), hi.y.max(c.y)),
            )
        },
    );
    let nc = cells.len();
    let one_run = |run: usize| -> Vec<f64> {
        let mut field = vec![Complex64::new(0.0, 0.0); nc];
        let blocks = config.n_photons_sim.div_ceil(BLOCK_SIZE);
        for b in 0..blocks {
            let n = BLOCK_SIZE.min(config.n_photons_sim - b * BLOCK_SIZE);
            let mut rng = block_rng(config.seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), b as u64);
            for _ in 0..n {
                let mut p = source_photon(channel.r0, &mut rng);
                prop.advance(&mut p, z_end, &mut rng);
                let phase: f64 = 2.0 * PI * rng.random::<f64>();
                if p.r.x < lo.x - reach || p.r.x > hi.x + reach || p.r.y < lo.y - reach || p.r.y > hi.y + reach {
                    continue;
                }
                for (e, c) in field.iter_mut().zip(cells) {
                    let d = *c - p.r;
                    let env = (-d.norm_sq() / (2.0 * packet_width * packet_width)).exp();
                    if env > 0.0 {
                        *e += Complex64::from_polar(env, phase + p.q.dot(d));
                    }
                }
            }
        }
        field.iter().map(|e| e.norm_sqr()).collect()
    };
    let samples: Vec<Vec<f64>> = with_pool(config.worker_hint, || {
        (0..config.runs).into_par_iter().map(one_run).collect()
    })?;

    let runs = samples.len() as f64;
    let mean: Vec<f64> = (0..nc)
        .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / runs)
        .collect();
    let mut covariance = vec![0.0; nc * nc];
    let mut standard_error = vec![0.0; nc * nc];
    for i in 0..nc {
        for j in 0..nc {
            let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (runs - 1.0);
            let v = prods.iter().map(|x| (x - c) * (x - c)).sum::<f64>() / (runs - 1.0);
            covariance[i * nc + j] = c;
            standard_error[i * nc + j] = (v / runs).sqrt();
        }
    }
    // least squares of ln(cov/cov0) = −Δ²/ℓ² through the origin, positive entries only
    let c0 = covariance[0];
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for j in 1..nc {
        let c = covariance[j];
        if c0 > 0.0 && c > 0.05 * c0 {
            let d2 = (cells[j] - cells[0]).norm_sq();
            sxy += d2 * (c / c0).ln();
            sxx += d2 * d2;
        }
    }
    let decay_length = if sxx > 0.0 && sxy < 0.0 {
        (-sxx / sxy).sqrt()
    } else {
        f64::NAN
    };
    let m = turbulent_moments(&channel.at_distance(z_end), spectrum)?;
    Ok(CovarianceEstimate {
        cells: cells.to_vec(),
        runs: config.runs,
        mean,
        covariance,
        standard_error,
        decay_length,
        expected_decay_length: (8.0 / m.q2).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{mean_q2_closed, mean_r2_closed};

    fn channel() -> BeamChannel {
        BeamChannel::new(0.01, 1e7, 20_000.0, 1e8).unwrap()
    }

    fn tat() -> TurbulenceSpectrum {
        TurbulenceSpectrum::tatarskii(2.5e-14, 1e-3).unwrap()
    }

    fn within(got: f64, se: f64, want: f64, k: f64) -> bool {
        (got - want).abs() <= k * se
    }

    #[test]
    fn source_moments() {
        let ch = channel();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ph = init_source(&ch, 200_000, &mut rng);
        let mut acc = MomentAccumulator::default();
        ph.iter().for_each(|p| acc.push(p));
        let m = acc.finish(0.0);
        assert!(within(m.mean_q2, m.se_q2, 2.0 / (ch.r0 * ch.r0), 3.0));
        assert!(within(m.mean_r2, m.se_r2, ch.r0 * ch.r0 / 2.0, 3.0));
        assert!(within(m.mean_rq, m.se_rq, 0.0, 3.0));
    }

    #[test]
    fn free_propagation() {
        let ch = channel();
        let s0 = TurbulenceSpectrum::tatarskii(0.0, 1e-3).unwrap();
        for model in [McModel::Force, McModel::Collision] {
            let cfg = McConfig::new(50_000, 3, model, vec![5_000.0, 20_000.0]);
            let out = simulate(&cfg, &ch, &s0).unwrap();
            for m in &out.samples {
                let c = ch.at_distance(m.z);
                assert!(within(m.mean_q2, m.se_q2, 2.0 / (ch.r0 * ch.r0), 3.0));
                assert!(within(m.mean_r2, m.se_r2, diffraction_r2(&c), 3.0));
            }
        }
    }

    #[test]
    fn random_force_moments() {
        let (ch, s) = (channel(), tat());
        let cfg = McConfig::new(100_000, 11, McModel::Force, vec![5_000.0, 10_000.0, 20_000.0]);
        let out = simulate(&cfg, &ch, &s).unwrap();
        for m in &out.samples {
            let c = ch.at_distance(m.z);
            assert_eq!(m.count, 100_000);
            assert!(
                within(m.mean_q2, m.se_q2, mean_q2_closed(&c, &s).unwrap(), 3.0),
                "{m:?}"
            );
            assert!(
                within(m.mean_r2, m.se_r2, mean_r2_closed(&c, &s).unwrap(), 3.0),
                "{m:?}"
            );
        }
    }

    #[test]
    fn deterministic_across_workers() {
        let vk = TurbulenceSpectrum::von_karman(2.5e-16, 1e-3, 10.0).unwrap();
        let ch = channel().at_distance(300.0);
        let mut cfg = McConfig::new(10_000, 5, McModel::Collision, vec![100.0, 300.0]);
        cfg.histograms = true;
        let a = simulate(&cfg, &ch, &vk).unwrap();
        cfg.worker_hint = 4;
        let b = simulate(&cfg, &ch, &vk).unwrap();
        assert_eq!(format_moments_csv(&a), format_moments_csv(&b));
        assert_eq!(a.histograms, b.histograms);
    }

    #[test]
    fn collision_needs_outer_scale() {
        let cfg = McConfig::new(10, 1, McModel::Collision, vec![1.0]);
        assert!(matches!(
            simulate(&cfg, &channel(), &tat()),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn config_checks() {
        let mut cfg = McConfig::new(10, 1, McModel::Force, vec![2.0, 1.0]);
        assert!(cfg.validate().is_err());
        cfg.sample_distances = vec![1.0, 2.0];
        cfg.n_photons_sim = 0;
        assert!(cfg.validate().is_err());
        assert_eq!("force".parse::<McModel>().unwrap(), McModel::Force);
        assert!("walk".parse::<McModel>().is_err());
    }

    #[test]
    fn histogram_counts_photons() {
        let mut cfg = McConfig::new(5_000, 2, McModel::Force, vec![20_000.0]);
        cfg.histograms = true;
        let out = simulate(&cfg, &channel(), &tat()).unwrap();
        let h = &out.histograms[0];
        // ±4 rms radii hold all but ~e^(−16) of a Gaussian
        assert_eq!(h.total(), 5_000);
        let prof = h.radial_profile(32);
        assert!((prof.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_identity() {
        let vk = TurbulenceSpectrum::von_karman(2.5e-16, 1e-3, 10.0).unwrap();
        let r = kernel_identity_residual(&channel(), &vk).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn covariance_decay() {
        let (ch, s) = (channel(), tat());
        let l = (8.0 / turbulent_moments(&ch, &s).unwrap().q2).sqrt();
        let cells: Vec<Vec2> = (0..6)
            .map(|i| Vec2::new(i as f64 * 0.4 * l, 0.0))
            .chain(std::iter::once(Vec2::new(40.0 * l, 0.0)))
            .collect();
        let mut cfg = McConfig::new(100_000, 9, McModel::Force, vec![20_000.0]);
        cfg.runs = 200;
        let est = intensity_covariance(&cfg, &ch, &s, &cells, 25.0 * l).unwrap();
        for i in 0..cells.len() {
            assert!(est.get(i, i) >= 0.0);
        }
        let rel = est.decay_length / est.expected_decay_length;
        assert!(
            (rel - 1.0).abs() < 0.25,
            "{} vs {}",
            est.decay_length,
            est.expected_decay_length
        );
        let far = est.get(0, 6);
        assert!(
            far.abs() <= 3.0 * est.standard_error[6],
            "{far} ± {}",
            est.standard_error[6]
        );
    }
}
