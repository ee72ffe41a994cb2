use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn beamkin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamkin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = beamkin(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Data rows (comment and header lines dropped) split into floats.
fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn header(csv: &str) -> &str {
    csv.lines().find(|l| !l.starts_with('#')).unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn provenance_comment_and_repeatability() {
    let a = stdout(&["moments", "--points", "4"]);
    let b = stdout(&["moments", "--points", "4"]);
    assert_eq!(a, b);
    let first = a.lines().next().unwrap();
    assert!(first.starts_with("# beamkin "), "{first}");
    assert!(first.contains("config_sha256=") && first.contains("seed=none"));
    let other = stdout(&["moments", "--points", "5"]);
    assert_ne!(first, other.lines().next().unwrap());
}

#[test]
fn moments_columns_and_growth() {
    let csv = stdout(&["moments", "--z-min", "1000", "--z-max", "20000", "--points", "6"]);
    assert_eq!(header(&csv), "z,mean_q2,mean_r2,nu_t,regime");
    let r = rows(&csv);
    assert_eq!(r.len(), 6);
    assert!(r.windows(2).all(|w| w[1][1] > w[0][1] && w[1][2] > w[0][2]));
    // no outer scale: ν diverges and the column is left empty
    assert!(csv.lines().last().unwrap().contains(",,"));
}

#[test]
fn mc_byte_identical_across_thread_hints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("vk.json");
    fs::write(&cfg, r#"{"spectrum": {"cn2": 2.5e-16, "outer_scale_m": 10}}"#).unwrap();
    for model in ["force", "collision"] {
        let mut outputs = Vec::new();
        for threads in ["1", "4", "8", "1"] {
            let dir = tmp.path().join(format!("{model}-{threads}-{}", outputs.len()));
            let out = beamkin(&[
                "--config",
                cfg.to_str().unwrap(),
                "--threads",
                threads,
                "--out",
                dir.to_str().unwrap(),
                "mc",
                "--model",
                model,
                "--photons",
                "9000",
                "--seed",
                "7",
                "--z-samples",
                "500,1000",
                "--histograms",
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            outputs.push(read_dir_sorted(&dir));
        }
        assert_eq!(outputs[0].len(), 3);
        assert!(outputs.iter().all(|o| *o == outputs[0]), "{model} output differs");
        let series = String::from_utf8(outputs[0][2].1.clone()).unwrap();
        assert!(series.lines().next().unwrap().ends_with("seed=7"));
        assert_eq!(header(&series), "z,count,mean_q2,se_q2,mean_r2,se_r2,mean_rq,se_rq");
        let hist = String::from_utf8(outputs[0][0].1.clone()).unwrap();
        assert_eq!(header(&hist), "ix,iy,count");
        let total: f64 = rows(&hist).iter().map(|r| r[2]).sum();
        assert!(total > 8_900.0 && total <= 9_000.0);
    }
}

#[test]
fn scan_peak_symmetry_and_decay() {
    let csv = stdout(&["scan", "--r-max", "4e-3", "--points", "9"]);
    assert_eq!(header(&csv), "r,separation,correlation_term");
    let r = rows(&csv);
    // N/(π⟨r²⟩_T) at the reference parameters
    let peak = (1e8 / (std::f64::consts::PI * 2.41724f64)).powi(2);
    assert!((r[0][2] / peak - 1.0).abs() < 1e-4);
    // the midpoint stays on axis, so only the separation decays: exp(−d²⟨q²⟩_T/8)
    let q2 = 1.8129e6;
    for row in &r {
        let want = peak * (-row[1] * row[1] * q2 / 8.0).exp();
        assert!((row[2] / want - 1.0).abs() < 1e-3);
    }
    // swapping the detectors is the sign flip r → −r
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.csv");
    fs::write(&pairs, "0.002,0,-0.002,0\n-0.002,0,0.002,0\n").unwrap();
    let fm = rows(&stdout(&["fourth-moment", "--pairs", pairs.to_str().unwrap()]));
    assert_eq!(fm[0][6], fm[1][6]);
}

#[test]
fn fourth_moment_methods_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.csv");
    fs::write(&pairs, "x,y,x',y'\n0,0,0.001,0\n0.4,-0.3,0.4005,-0.2995\n").unwrap();
    let p = pairs.to_str().unwrap();
    let closed = stdout(&["fourth-moment", "--pairs", p]);
    let general = stdout(&["fourth-moment", "--pairs", p, "--method", "general"]);
    assert_eq!(header(&closed), "x,y,x',y',shot_coeff,mean_product,correlation_term");
    for (a, b) in rows(&closed).iter().zip(&rows(&general)) {
        assert!((a[6] / b[6] - 1.0).abs() < 0.01);
        assert!((a[5] / b[5] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn scintillation_sweep_decreases() {
    let csv = stdout(&["scintillation", "--points", "8"]);
    assert_eq!(header(&csv), "R,eta_mean,eta_var,sigma2");
    let r = rows(&csv);
    assert!(r[0][3] > 0.95 && r[0][3] <= 1.0);
    assert!(r.windows(2).all(|w| w[1][3] <= w[0][3]));
}

#[test]
fn figures_written() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("figs");
    let out = beamkin(&["--out", dir.to_str().unwrap(), "figures", "--svg", "--points", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = read_dir_sorted(&dir).into_iter().map(|(n, _)| n).collect();
    for f in ["fig1a", "fig1b", "fig2", "fig3"] {
        assert!(
            names.contains(&format!("{f}.csv")) && names.contains(&format!("{f}.svg")),
            "{f}"
        );
    }
    let fig2 = fs::read_to_string(dir.join("fig2.csv")).unwrap();
    assert_eq!(header(&fig2), "R,sigma2_numeric,sigma2_delta");
    let fig3 = rows(&fs::read_to_string(dir.join("fig3.csv")).unwrap());
    let last = fig3.last().unwrap();
    assert!(last[2] > 10.0 * last[1]);
    let fig1 = fs::read_to_string(dir.join("fig1a.csv")).unwrap();
    assert_eq!(
        header(&fig1),
        "x,solid_literal,dash_literal,solid_consistent,dash_consistent"
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"spectrum": {"inner_scale_m": 0}}"#).unwrap();
    let out = beamkin(&["--config", bad.to_str().unwrap(), "moments"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spectrum.inner_scale_m"));

    fs::write(&bad, r#"{"channel": {"z_m": 0}}"#).unwrap();
    let pts = tmp.path().join("pts.csv");
    fs::write(&pts, "0,0,0,0\n").unwrap();
    let out = beamkin(&[
        "--config",
        bad.to_str().unwrap(),
        "pdf",
        "--points",
        pts.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = beamkin(&["mc", "--histograms", "--photons", "10"]);
    assert_eq!(out.status.code(), Some(2));

    let out = beamkin(&["scintillation", "--r-min", "2", "--r-max", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gamma_small_argument_limit() {
    let csv = stdout(&["gamma", "--p-min", "1e-7", "--p-max", "1e-5", "--points", "3"]);
    for r in rows(&csv) {
        assert!((r[1] / r[2] - 1.0).abs() < 1e-3);
    }
}
