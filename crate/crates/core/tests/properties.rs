use beamkin::aperture::{
    aperture_scintillation, transmittance_mean, transmittance_variance_delta, ApertureConfig, VarianceMethod,
};
use beamkin::fourth_moment::{
    correlation_decay_length, fourier_f, gamma4_closed, gamma4_general, quantum_classical_boundary, AsymptoticSlices,
    PdfSlice, QGrid,
};
use beamkin::moments::{mean_q2_closed, turbulent_moments};
use beamkin::montecarlo::{simulate, McConfig, McModel};
use beamkin::{BeamChannel, PdfModel, TurbulenceSpectrum, Vec2};
use proptest::prelude::*;

fn channel() -> BeamChannel {
    BeamChannel::new(0.01, 1e7, 20_000.0, 1e8).unwrap()
}

fn tat() -> TurbulenceSpectrum {
    TurbulenceSpectrum::tatarskii(2.5e-14, 1e-3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fourier_bounded_by_zero_shift(mx in -1.0f64..1.0, my in -1.0f64..1.0, dx in -4e-3f64..4e-3, dy in -4e-3f64..4e-3) {
        let provider = AsymptoticSlices::new(&channel(), &tat(), PdfModel::MomentConsistent).unwrap();
        let pdf = provider.pdf;
        let slice = PdfSlice::asymptotic(&pdf, Vec2::new(mx, my), 49).unwrap();
        let f0 = fourier_f(&slice, Vec2::ZERO).unwrap();
        let f = fourier_f(&slice, Vec2::new(dx, dy)).unwrap();
        prop_assert!(f.norm() <= f0.re * (1.0 + 1e-12));
        prop_assert!(f0.im.abs() <= 1e-12 * f0.re);
    }

    #[test]
    fn general_closure_matches_closed_form(x in -1.5f64..1.5, y in -1.5f64..1.5, dx in -3e-3f64..3e-3, dy in -3e-3f64..3e-3) {
        let (ch, s) = (channel(), tat());
        let provider = AsymptoticSlices::new(&ch, &s, PdfModel::MomentConsistent).unwrap();
        let r = Vec2::new(x, y);
        let rp = r + Vec2::new(dx, dy);
        let g = gamma4_general(&provider, r, rp).unwrap();
        let c = gamma4_closed(&ch, &s, r, rp, PdfModel::MomentConsistent).unwrap();
        prop_assert!((g.correlation_term / c.correlation_term - 1.0).abs() < 0.01);
        prop_assert!(g.correlation_term >= 0.0 && g.mean_product >= 0.0 && g.shot_coefficient >= 0.0);
    }

    #[test]
    fn transmittance_bounds(k in -3.0f64..1.0) {
        let (ch, s) = (channel(), tat());
        let ap = ApertureConfig::new(10f64.powf(k)).unwrap();
        let m = transmittance_mean(&ch, &s, &ap).unwrap();
        prop_assert!(m > 0.0 && m < 1.0 || (k > 0.5 && m == 1.0));
        prop_assert!(transmittance_variance_delta(&ch, &s, &ap).unwrap() >= 0.0);
    }
}

#[test]
fn boundary_radius_monotone() {
    let s = tat();
    let mut prev = 0.0;
    for n in [1e6, 1e7, 1e8, 1e9, 1e10] {
        let rq = quantum_classical_boundary(&channel().with_photons(n), &s)
            .unwrap()
            .radius
            .unwrap();
        assert!(rq > prev);
        prev = rq;
    }
    // near the threshold the boundary moves inward with distance until it vanishes
    let near = channel().with_photons(2e6);
    let mut prev = f64::INFINITY;
    for z in [20_000.0, 22_000.0, 24_000.0, 26_000.0] {
        let rq = quantum_classical_boundary(&near.at_distance(z), &s)
            .unwrap()
            .radius
            .unwrap();
        assert!(rq < prev, "{z}: {rq} vs {prev}");
        prev = rq;
    }
    assert!(quantum_classical_boundary(&near.at_distance(30_000.0), &s)
        .unwrap()
        .radius
        .is_none());
}

#[test]
fn numeric_scintillation_nonincreasing_and_bounded() {
    let (ch, s) = (channel(), tat());
    let rt = turbulent_moments(&ch, &s).unwrap().r2.sqrt();
    let mut prev = f64::INFINITY;
    for k in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 4.0] {
        let st =
            aperture_scintillation(&ch, &s, &ApertureConfig::new(k * rt).unwrap(), VarianceMethod::Numeric).unwrap();
        assert!(st.sigma2 <= prev);
        assert!(st.eta_var >= 0.0 && st.eta_mean > 0.0 && st.eta_mean <= 1.0);
        prev = st.sigma2;
    }
}

#[test]
fn fig3_channels_ordered() {
    let a = (channel(), tat());
    let b = (
        channel().at_distance(100_000.0),
        TurbulenceSpectrum::tatarskii(2.5e-16, 1e-3).unwrap(),
    );
    let big = |ch: &BeamChannel, s: &TurbulenceSpectrum| {
        let r = 5.0 * turbulent_moments(ch, s).unwrap().r2.sqrt();
        aperture_scintillation(ch, s, &ApertureConfig::new(r).unwrap(), VarianceMethod::Delta)
            .unwrap()
            .sigma2
    };
    assert!(big(&b.0, &b.1) > 10.0 * big(&a.0, &a.1));
    // the slower momentum gain of the second channel
    let qa = turbulent_moments(&a.0, &a.1).unwrap().q2;
    let qb = turbulent_moments(&b.0, &b.1).unwrap().q2;
    assert!((qa / qb - 20.0).abs() < 1e-9);
}

#[test]
fn correlation_length_shrinks_with_distance() {
    let s = tat();
    let l1 = correlation_decay_length(&channel().at_distance(10_000.0), &s).unwrap();
    let l4 = correlation_decay_length(&channel().at_distance(40_000.0), &s).unwrap();
    assert!((l1 / l4 - 2.0).abs() < 1e-12);
}

#[test]
fn slice_grid_must_cover_distribution() {
    let grid = QGrid::centered(Vec2::ZERO, 1.0, 33).unwrap();
    assert!(PdfSlice::sample(Vec2::ZERO, grid, |pt| (-pt.q.norm_sq()).exp()).is_err());
    assert!(PdfSlice::sample(Vec2::ZERO, grid, |pt| (-100.0 * pt.q.norm_sq()).exp()).is_ok());
}

#[test]
fn collision_model_conserves_photons_and_heats() {
    let vk = TurbulenceSpectrum::von_karman(2.5e-16, 1e-3, 10.0).unwrap();
    let ch = channel().at_distance(2_000.0);
    let zs: Vec<f64> = (1..=8).map(|i| 250.0 * i as f64).collect();
    let out = simulate(&McConfig::new(8_000, 17, McModel::Collision, zs.clone()), &ch, &vk).unwrap();
    assert!(out.samples.iter().all(|m| m.count == 8_000));
    // least-squares slope of ⟨q²⟩ against z
    let n = zs.len() as f64;
    let mz = zs.iter().sum::<f64>() / n;
    let mq = out.samples.iter().map(|m| m.mean_q2).sum::<f64>() / n;
    let slope: f64 = zs
        .iter()
        .zip(&out.samples)
        .map(|(z, m)| (z - mz) * (m.mean_q2 - mq))
        .sum::<f64>();
    assert!(slope >= 0.0);
    let last = out.samples.last().unwrap();
    let want = mean_q2_closed(&ch, &vk).unwrap();
    assert!(
        (last.mean_q2 - want).abs() < 4.0 * last.se_q2,
        "{} vs {want}",
        last.mean_q2
    );
}
