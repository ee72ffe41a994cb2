mod config;
mod figures;
mod svg;

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use beamkin::aperture::{scintillation_sweep, VarianceMethod};
use beamkin::fourth_moment::{
    correlation_decay_length, gamma4_closed_batch, gamma4_general_batch, AsymptoticSlices, FourthMomentTerms,
};
use beamkin::kinetics::{format_pdf_csv, gamma_quadrature, gamma_relax, parse_points_csv, AsymptoticPdf, GeneralPdf};
use beamkin::moments::{moment_report, turbulent_moments};
use beamkin::montecarlo::{format_histogram_csv, format_moments_csv, simulate, McConfig, McModel};
use beamkin::turbulence::alpha_best;
use beamkin::validation::{validate_all, ValidationOptions};
use beamkin::{PdfModel, Vec2};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "beamkin",
    version,
    about = "Kinetic theory of laser beams in atmospheric turbulence"
)]
struct Cli {
    /// JSON configuration (channel, spectrum, mc sections); reference defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; single-file commands print to stdout without it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (a hint; results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Coefficient convention of the asymptotic distribution (before the subcommand).
    #[arg(long, default_value = "consistent", value_parser = parse_model)]
    model: PdfModel,
    #[command(subcommand)]
    command: Command,
}

fn parse_model(s: &str) -> std::result::Result<PdfModel, String> {
    s.parse().map_err(|e: beamkin::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PdfMethod {
    Asymptotic,
    General,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Gamma4Method {
    Closed,
    General,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Numeric,
    Delta,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Collision,
    Force,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Figure {
    Fig1,
    Fig2,
    Fig3,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Relaxation frequency γ(P) on a logarithmic grid.
    Gamma {
        #[arg(long, default_value_t = 1e-2)]
        p_min: f64,
        #[arg(long, default_value_t = 1e5)]
        p_max: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        /// Add a column evaluated by direct quadrature.
        #[arg(long)]
        quadrature: bool,
    },
    /// Average distribution at phase-space points read as x,y,qx,qy rows.
    Pdf {
        /// Points file (`-` for stdin).
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum, default_value = "asymptotic")]
        method: PdfMethod,
        /// Relative tolerance of the general quadrature.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Closed-form beam moments over propagation distance.
    Moments {
        #[arg(long, default_value_t = 1000.0)]
        z_min: f64,
        /// Defaults to the configured distance.
        #[arg(long)]
        z_max: Option<f64>,
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Fourth-order moment terms at pairs read as x,y,x',y' rows.
    FourthMoment {
        /// Pairs file (`-` for stdin).
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum, default_value = "closed")]
        method: Gamma4Method,
    },
    /// Aperture-averaged scintillation index over receiver radius.
    Scintillation {
        /// Defaults to 1e-4 of the turbulent beam radius.
        #[arg(long)]
        r_min: Option<f64>,
        /// Defaults to 10 turbulent beam radii.
        #[arg(long)]
        r_max: Option<f64>,
        #[arg(long, default_value_t = 40)]
        points: usize,
        #[arg(long, value_enum, default_value = "numeric")]
        method: MethodArg,
    },
    /// Monte Carlo photon transport.
    Mc {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        photons: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated sample distances, m.
        #[arg(long, value_delimiter = ',')]
        z_samples: Option<Vec<f64>>,
        /// Write one histogram file per sample distance (needs --out).
        #[arg(long)]
        histograms: bool,
    },
    /// Figure data: PDF profiles, scintillation vs radius, two channels.
    Figures {
        #[arg(value_enum, default_value = "all")]
        which: Figure,
        /// Also write SVG plots.
        #[arg(long)]
        svg: bool,
        /// Radii per scintillation curve.
        #[arg(long, default_value_t = 60)]
        points: usize,
    },
    /// Two-detector scan at (r, −r) along x.
    Scan {
        /// Defaults to twice the correlation length.
        #[arg(long)]
        r_max: Option<f64>,
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// Runs the acceptance criteria and writes a JSON report.
    Validate {
        /// Scale factor applied to the turbulence strength under test.
        #[arg(long, default_value_t = 1.0)]
        fault_alpha: f64,
    },
}

/// The validation suite ran but at least one criterion failed.
#[derive(Debug)]
struct ValidationFailed(usize);

impl fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation criteria failed", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

/// Writes files to the output directory, or stdout when none is set.
pub(crate) struct Sink {
    dir: Option<PathBuf>,
    header: String,
}

impl Sink {
    fn new(dir: Option<PathBuf>, cfg: &RunConfig, command: &str, seed: Option<u64>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).with_context(|| format!("cannot create output directory {}", d.display()))?;
        }
        let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let header = format!(
            "# beamkin {} config_sha256={} seed={}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.hash(command),
            seed
        );
        Ok(Self { dir, header })
    }

    fn require_dir(&self, what: &str) -> Result<&Path> {
        self.dir
            .as_deref()
            .ok_or_else(|| ConfigError(format!("{what} needs --out DIR")).into())
    }

    /// CSV with the provenance comment line prepended.
    pub(crate) fn csv(&self, name: &str, body: &str) -> Result<()> {
        self.raw(name, &format!("{}{}", self.header, body))
    }

    pub(crate) fn raw(&self, name: &str, text: &str) -> Result<()> {
        match &self.dir {
            Some(d) => {
                let path = d.join(name);
                std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

pub(crate) fn collect<T>(v: Vec<beamkin::Result<T>>) -> Result<Vec<T>> {
    Ok(v.into_iter().collect::<beamkin::Result<Vec<T>>>()?)
}

pub(crate) fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && lo.is_finite() && hi.is_finite()) || n < 2 {
        return Err(ConfigError(format!(
            "need 0 < min < max and at least 2 points, got [{lo}, {hi}] with {n}"
        ))
        .into());
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

pub(crate) fn lin_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(hi > lo && lo.is_finite() && hi.is_finite()) || n < 2 {
        return Err(ConfigError(format!(
            "need min < max and at least 2 points, got [{lo}, {hi}] with {n}"
        ))
        .into());
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

fn read_input(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())).into())
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(Vec2, Vec2)>> {
    // the four columns parse exactly like phase-space points
    let pts = parse_points_csv(text).map_err(|e| ConfigError(format!("pairs file: {e}")))?;
    Ok(pts.iter().map(|p| (p.r, p.q)).collect())
}

fn fourth_moment_csv(pairs: &[(Vec2, Vec2)], terms: &[FourthMomentTerms]) -> String {
    let mut s = String::from("x,y,x',y',shot_coeff,mean_product,correlation_term\n");
    for ((r, rp), t) in pairs.iter().zip(terms) {
        s.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.x, r.y, rp.x, rp.y, t.shot_coefficient, t.mean_product, t.correlation_term
        ));
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be >= 1".into()).into());
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Command::Mc {
        model,
        photons,
        seed,
        z_samples,
        histograms,
    } = &cli.command
    {
        if let Some(m) = model {
            cfg.mc.model = match m {
                ModelArg::Collision => McModel::Collision,
                ModelArg::Force => McModel::Force,
            };
        }
        if let Some(n) = photons {
            cfg.mc.photons = *n;
        }
        if let Some(s) = seed {
            cfg.mc.seed = *s;
        }
        if let Some(z) = z_samples {
            cfg.mc.z_samples_m = z.clone();
        }
        cfg.mc.histograms |= *histograms;
        cfg.check()?;
    }
    let channel = cfg.channel()?;
    let spectrum = cfg.spectrum()?;
    let seed = matches!(cli.command, Command::Mc { .. }).then_some(cfg.mc.seed);
    // the hash covers the physics, not the flags that only steer execution
    let hashed = match &cli.command {
        Command::Mc { .. } => "mc".to_string(),
        other => format!("{other:?} model={}", cli.model),
    };
    let sink = Sink::new(cli.out.clone(), &cfg, &hashed, seed)?;

    match cli.command {
        Command::Gamma {
            p_min,
            p_max,
            points,
            quadrature,
        } => {
            let grid = log_grid(p_min, p_max, points)?;
            let alpha = alpha_best(&spectrum, channel.q0)?;
            let mut s = String::from(if quadrature {
                "P,gamma,alpha_p2,gamma_quadrature\n"
            } else {
                "P,gamma,alpha_p2\n"
            });
            for p in grid {
                let g = gamma_relax(&spectrum, channel.q0, p)?;
                s.push_str(&format!("{p:e},{g:e},{:e}", alpha * p * p));
                if quadrature {
                    s.push_str(&format!(",{:e}", gamma_quadrature(&spectrum, channel.q0, p)?));
                }
                s.push('\n');
            }
            sink.csv("gamma.csv", &s)
        }
        Command::Pdf { points, method, tol } => {
            let pts = parse_points_csv(&read_input(&points)?).map_err(|e| ConfigError(format!("points file: {e}")))?;
            let values = match method {
                PdfMethod::Asymptotic => {
                    let pdf = AsymptoticPdf::new(&channel, &spectrum, cli.model)?;
                    pts.iter().map(|p| pdf.eval(p)).collect()
                }
                PdfMethod::General => {
                    let pdf = GeneralPdf::new(&channel, &spectrum, false)?;
                    collect(beamkin::kinetics::pdf_general_batch(&pdf, &pts, tol))?
                        .iter()
                        .map(|v| v.value)
                        .collect::<Vec<_>>()
                }
            };
            sink.csv("pdf.csv", &format_pdf_csv(&pts, &values))
        }
        Command::Moments { z_min, z_max, points } => {
            let grid = lin_grid(z_min, z_max.unwrap_or(channel.z), points)?;
            let mut s = String::from("z,mean_q2,mean_r2,nu_t,regime\n");
            for z in grid {
                let m = moment_report(&channel.at_distance(z), &spectrum)?;
                let nt = m.nu_t.map_or_else(String::new, |v| format!("{v:e}"));
                s.push_str(&format!(
                    "{:e},{:e},{:e},{nt},{}\n",
                    m.z, m.mean_q2, m.mean_r2, m.regime
                ));
            }
            sink.csv("moments.csv", &s)
        }
        Command::FourthMoment { pairs, method } => {
            let pairs = parse_pairs(&read_input(&pairs)?)?;
            let terms = match method {
                Gamma4Method::Closed => collect(gamma4_closed_batch(&channel, &spectrum, &pairs, cli.model))?,
                Gamma4Method::General => {
                    let provider = AsymptoticSlices::new(&channel, &spectrum, cli.model)?;
                    collect(gamma4_general_batch(&provider, &pairs))?
                }
            };
            sink.csv("fourth_moment.csv", &fourth_moment_csv(&pairs, &terms))
        }
        Command::Scintillation {
            r_min,
            r_max,
            points,
            method,
        } => {
            let rt = turbulent_moments(&channel, &spectrum)?.r2.sqrt();
            let grid = log_grid(r_min.unwrap_or(1e-4 * rt), r_max.unwrap_or(10.0 * rt), points)?;
            let method = match method {
                MethodArg::Numeric => VarianceMethod::Numeric,
                MethodArg::Delta => VarianceMethod::Delta,
            };
            let stats = collect(scintillation_sweep(&channel, &spectrum, &grid, method))?;
            let mut s = String::from("R,eta_mean,eta_var,sigma2\n");
            for st in stats {
                s.push_str(&format!(
                    "{:e},{:e},{:e},{:e}\n",
                    st.radius, st.eta_mean, st.eta_var, st.sigma2
                ));
            }
            sink.csv("scintillation.csv", &s)
        }
        Command::Mc { .. } => {
            let mc = &cfg.mc;
            let dir = if mc.histograms {
                Some(sink.require_dir("mc --histograms")?)
            } else {
                None
            };
            let mut config = McConfig::new(mc.photons, mc.seed, mc.model, mc.z_samples_m.clone());
            config.worker_hint = cli.threads.unwrap_or(1);
            config.histograms = mc.histograms;
            let out = simulate(&config, &channel, &spectrum)?;
            sink.csv("mc_moments.csv", &format_moments_csv(&out))?;
            if dir.is_some() {
                for (i, h) in out.histograms.iter().enumerate() {
                    let body = format!(
                        "# z={:e} half_extent={:e}\n{}",
                        h.z,
                        h.half_extent,
                        format_histogram_csv(h)
                    );
                    sink.csv(&format!("mc_histogram_{i:03}.csv"), &body)?;
                }
            }
            Ok(())
        }
        Command::Figures { which, svg, points } => {
            if sink.dir.is_none() {
                return Err(ConfigError("figures needs --out DIR".into()).into());
            }
            let all = which == Figure::All;
            if all || which == Figure::Fig1 {
                figures::fig1(&sink, &channel, &spectrum, svg)?;
            }
            if all || which == Figure::Fig2 {
                figures::fig2(&sink, &channel, &spectrum, points, svg)?;
            }
            if all || which == Figure::Fig3 {
                figures::fig3(&sink, &channel, &spectrum, points, svg)?;
            }
            Ok(())
        }
        Command::Scan { r_max, points } => {
            let r_max = match r_max {
                Some(r) => r,
                None => 2.0 * correlation_decay_length(&channel, &spectrum)?,
            };
            let grid = lin_grid(0.0, r_max, points)?;
            let pairs: Vec<(Vec2, Vec2)> = grid.iter().map(|&r| (Vec2::new(r, 0.0), Vec2::new(-r, 0.0))).collect();
            let terms = collect(gamma4_closed_batch(&channel, &spectrum, &pairs, cli.model))?;
            let mut s = String::from("r,separation,correlation_term\n");
            for (r, t) in grid.iter().zip(&terms) {
                s.push_str(&format!("{r:e},{:e},{:e}\n", 2.0 * r, t.correlation_term));
            }
            sink.csv("scan.csv", &s)
        }
        Command::Validate { fault_alpha } => {
            if !(fault_alpha.is_finite() && fault_alpha > 0.0) {
                return Err(ConfigError(format!("--fault-alpha must be > 0, got {fault_alpha}")).into());
            }
            let opts = ValidationOptions {
                alpha_scale: fault_alpha,
                ..ValidationOptions::default()
            };
            let report = validate_all(&opts);
            for c in &report.criteria {
                eprintln!(
                    "criterion {} [{}] {} ({:.2} s)",
                    c.id,
                    if c.passed { "PASS" } else { "FAIL" },
                    c.title,
                    c.seconds
                );
            }
            let json = serde_json::to_string_pretty(&report)? + "\n";
            sink.raw("validation.json", &json)?;
            let failed = report.criteria.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(ValidationFailed(failed).into());
            }
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<ValidationFailed>() {
            return 4;
        }
        if let Some(be) = cause.downcast_ref::<beamkin::Error>() {
            return if matches!(
                be,
                beamkin::Error::InvalidParameter { .. } | beamkin::Error::Incompatible(_)
            ) {
                2
            } else {
                3
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
