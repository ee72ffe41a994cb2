use anyhow::Result;
use beamkin::aperture::{scintillation_sweep, VarianceMethod};
use beamkin::kinetics::AsymptoticPdf;
use beamkin::moments::turbulent_moments;
use beamkin::turbulence::alpha_best;
use beamkin::{BeamChannel, PdfModel, PhaseSpacePoint, TurbulenceSpectrum, SPEED_OF_LIGHT};

use crate::svg::{Plot, Series};
use crate::{collect, lin_grid, log_grid, Sink};

const PROFILE_POINTS: usize = 201;

type Slice<'a> = dyn Fn(f64) -> PhaseSpacePoint + 'a;

/// Fixed-slice PDF profiles: (a) over x at y = 0, (b) over q_x at q_y = 0,
/// each at two orthogonal offsets and in both coefficient conventions.
pub fn fig1(sink: &Sink, channel: &BeamChannel, spectrum: &TurbulenceSpectrum, svg: bool) -> Result<()> {
    let m = turbulent_moments(channel, spectrum)?;
    let alpha = alpha_best(spectrum, channel.q0)?;
    let q_fix = (alpha * channel.time()).sqrt();
    let r_fix = (channel.z.powi(3) * alpha / (3.0 * channel.q0 * channel.q0 * SPEED_OF_LIGHT)).sqrt();
    let lit = AsymptoticPdf::new(channel, spectrum, PdfModel::Literal)?;
    let con = AsymptoticPdf::new(channel, spectrum, PdfModel::MomentConsistent)?;

    let xs = lin_grid(-3.0 * m.r2.sqrt(), 3.0 * m.r2.sqrt(), PROFILE_POINTS)?;
    let qs = lin_grid(-3.0 * m.q2.sqrt(), 3.0 * m.q2.sqrt(), PROFILE_POINTS)?;
    let a_solid = |x: f64| PhaseSpacePoint::new(x, 0.0, 0.0, q_fix);
    let a_dash = |x: f64| PhaseSpacePoint::new(x, 0.0, q_fix, 0.0);
    let b_solid = |q: f64| PhaseSpacePoint::new(0.0, r_fix, q, 0.0);
    let b_dash = |q: f64| PhaseSpacePoint::new(r_fix, 0.0, q, 0.0);

    let panels: [(&str, &str, &[f64], &Slice, &Slice); 2] = [
        ("fig1a", "x", &xs, &a_solid, &a_dash),
        ("fig1b", "qx", &qs, &b_solid, &b_dash),
    ];
    for (name, axis, grid, solid, dash) in panels {
        let mut s = format!("{axis},solid_literal,dash_literal,solid_consistent,dash_consistent\n");
        let mut curves: [Vec<(f64, f64)>; 4] = Default::default();
        for &v in grid {
            let row = [
                lit.eval(&solid(v)),
                lit.eval(&dash(v)),
                con.eval(&solid(v)),
                con.eval(&dash(v)),
            ];
            s.push_str(&format!("{v:e},{:e},{:e},{:e},{:e}\n", row[0], row[1], row[2], row[3]));
            for (c, f) in curves.iter_mut().zip(row) {
                c.push((v, f));
            }
        }
        sink.csv(&format!("{name}.csv"), &s)?;
        if svg {
            let [c0, c1, c2, c3] = curves;
            let plot = Plot {
                title: &format!("{name}: distribution profile"),
                x_label: if axis == "x" { "x, m" } else { "qx, 1/m" },
                y_label: "f",
                log_x: false,
                log_y: false,
                series: vec![
                    Series {
                        name: "literal",
                        points: c0,
                        dashed: false,
                    },
                    Series {
                        name: "literal, rotated",
                        points: c1,
                        dashed: true,
                    },
                    Series {
                        name: "consistent",
                        points: c2,
                        dashed: false,
                    },
                    Series {
                        name: "consistent, rotated",
                        points: c3,
                        dashed: true,
                    },
                ],
            };
            sink.raw(&format!("{name}.svg"), &plot.render())?;
        }
    }
    Ok(())
}

/// σ_η² against receiver radius by the numeric and delta methods.
pub fn fig2(sink: &Sink, channel: &BeamChannel, spectrum: &TurbulenceSpectrum, points: usize, svg: bool) -> Result<()> {
    let rt = turbulent_moments(channel, spectrum)?.r2.sqrt();
    let radii = log_grid(1e-4 * rt, 10.0 * rt, points)?;
    let num = collect(scintillation_sweep(channel, spectrum, &radii, VarianceMethod::Numeric))?;
    let del = collect(scintillation_sweep(channel, spectrum, &radii, VarianceMethod::Delta))?;
    let mut s = String::from("R,sigma2_numeric,sigma2_delta\n");
    for (a, b) in num.iter().zip(&del) {
        s.push_str(&format!("{:e},{:e},{:e}\n", a.radius, a.sigma2, b.sigma2));
    }
    sink.csv("fig2.csv", &s)?;
    if svg {
        let plot = Plot {
            title: "fig2: aperture-averaged scintillation",
            x_label: "R, m",
            y_label: "sigma_eta^2",
            log_x: true,
            log_y: true,
            series: vec![
                Series {
                    name: "numeric",
                    points: num.iter().map(|a| (a.radius, a.sigma2)).collect(),
                    dashed: false,
                },
                Series {
                    name: "delta-correlated",
                    points: del.iter().map(|a| (a.radius, a.sigma2)).collect(),
                    dashed: true,
                },
            ],
        };
        sink.raw("fig2.svg", &plot.render())?;
    }
    Ok(())
}

/// σ_η² against radius for the configured channel and a weaker, longer one
/// (z = 100 km, Cₙ² = 2.5e−16) sharing the source.
pub fn fig3(sink: &Sink, channel: &BeamChannel, spectrum: &TurbulenceSpectrum, points: usize, svg: bool) -> Result<()> {
    let ch_b = channel.at_distance(100_000.0);
    let sp_b = TurbulenceSpectrum {
        cn2: 2.5e-16,
        ..*spectrum
    };
    let rt_a = turbulent_moments(channel, spectrum)?.r2.sqrt();
    let rt_b = turbulent_moments(&ch_b, &sp_b)?.r2.sqrt();
    let radii = log_grid(1e-4 * rt_a.min(rt_b), 10.0 * rt_a.max(rt_b), points)?;
    let a = collect(scintillation_sweep(channel, spectrum, &radii, VarianceMethod::Numeric))?;
    let b = collect(scintillation_sweep(&ch_b, &sp_b, &radii, VarianceMethod::Numeric))?;
    let mut s = String::from("R,sigma2_channel_a,sigma2_channel_b\n");
    for (x, y) in a.iter().zip(&b) {
        s.push_str(&format!("{:e},{:e},{:e}\n", x.radius, x.sigma2, y.sigma2));
    }
    sink.csv("fig3.csv", &s)?;
    if svg {
        let plot = Plot {
            title: "fig3: two channels",
            x_label: "R, m",
            y_label: "sigma_eta^2",
            log_x: true,
            log_y: true,
            series: vec![
                Series {
                    name: "configured channel",
                    points: a.iter().map(|v| (v.radius, v.sigma2)).collect(),
                    dashed: true,
                },
                Series {
                    name: "100 km, Cn2 2.5e-16",
                    points: b.iter().map(|v| (v.radius, v.sigma2)).collect(),
                    dashed: false,
                },
            ],
        };
        sink.raw("fig3.svg", &plot.render())?;
    }
    Ok(())
}
