mod common;

use statrefine::audit::{
    compare_reports, export_residuals, fit_g_for_denoiser, residual_display, residual_map, audit_images, AuditConfig,
    ConsistencyReport, Method, ReportRow,
};
use statrefine::aux::AuxConfig;
use statrefine::data::{load_pgm, NoiseSpec};
use statrefine::denoise::DenoiserSpec;
use statrefine::nets::{Arch, FinalInit, Net};
use statrefine::train::{image_tensor, Schedule, TargetSource};

use common::{noisy_set, tiny_estimator};

fn rows(energies: &[f64]) -> Vec<ReportRow> {
    energies
        .iter()
        .enumerate()
        .map(|(i, &e)| ReportRow {
            name: format!("img{i}"),
            energies: vec![e, e],
            energy: e,
        })
        .collect()
}

fn tiny_audit() -> AuditConfig {
    AuditConfig {
        g_width: 8,
        steps: 30,
        batch: 4,
        crop: 16,
        lr: Schedule::constant(1e-3),
        draws: 2,
    }
}

#[test]
fn comparison_counts_and_ratio() {
    let a = ConsistencyReport::from_rows("base", "h", rows(&[0.2, 0.4, 0.6]));
    let same = compare_reports(&a, &a).unwrap();
    assert_eq!((same.a_wins, same.b_wins, same.ties, same.ratio), (0, 0, 3, 1.0));
    let b = ConsistencyReport::from_rows("refined", "h", rows(&[0.1, 0.2, 0.3]));
    let c = compare_reports(&a, &b).unwrap();
    assert_eq!((c.a_wins, c.b_wins, c.ties), (0, 3, 0));
    assert!((c.ratio - 0.5).abs() < 1e-15);
    assert_eq!(c.b_win_fraction(), 1.0);
    assert!((a.aggregate - 0.4).abs() < 1e-15);
}

#[test]
fn comparison_rejects_mismatched_reports() {
    let a = ConsistencyReport::from_rows("base", "h1", rows(&[0.2, 0.4]));
    let b = ConsistencyReport::from_rows("refined", "h2", rows(&[0.2, 0.4]));
    assert!(compare_reports(&a, &b).is_err());
    let mut r = rows(&[0.2, 0.4]);
    r[1].name = "other".into();
    let c = ConsistencyReport::from_rows("refined", "h1", r);
    assert!(compare_reports(&a, &c).is_err());
    let d = ConsistencyReport::from_rows("refined", "h1", rows(&[0.2]));
    assert!(compare_reports(&a, &d).is_err());
}

#[test]
fn report_text_lists_every_image() {
    let a = ConsistencyReport::from_rows("base", "abc", rows(&[0.25, 0.5]));
    let t = a.to_text();
    assert!(t.contains("abc") && t.contains("img0") && t.contains("img1") && t.contains("aggregate"));
    assert_eq!(t.lines().count(), 5);
}

#[test]
fn residual_display_maps_zero_to_mid_gray() {
    let img = residual_display(&[0.0; 12], 3, 4).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.5));
    let img = residual_display(&[1.0, -1.0, 1.0, -1.0], 2, 2).unwrap();
    // rms 1, so ±1 lands at 0.5 ± 1/6
    assert!((img.data()[0] - (0.5 + 1.0 / 6.0)).abs() < 1e-15);
    assert!((img.data()[1] - (0.5 - 1.0 / 6.0)).abs() < 1e-15);
    let img = residual_display(&[10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 5).unwrap();
    assert_eq!(img.data()[0], 1.0);
}

#[test]
fn residuals_ignore_head_order_and_detect_offsets() {
    let (_, noisy) = noisy_set(6, 24, NoiseSpec::Gaussian { sigma: 25.0 }, 11);
    let aux = AuxConfig::default();
    let est = tiny_estimator(&noisy, &aux, 12);
    let gnets: Vec<Net<f32>> = (0..3)
        .map(|l| Net::init(Arch::Consistency { width: 8 }, l, FinalInit::Small).unwrap())
        .collect();
    let yhat = image_tensor::<f32>(&noisy[0]);
    let refiner: Net<f32> = Net::init(
        Arch::Refiner {
            depth: 3,
            width: 4,
            heads: 4,
        },
        1,
        FinalInit::Small,
    )
    .unwrap();
    let out = refiner.eval(&yhat).unwrap();
    let plane = 24 * 24;
    let mut rev = out.clone();
    for k in 0..4 {
        rev.data_mut()[k * plane..(k + 1) * plane].copy_from_slice(&out.data()[(3 - k) * plane..(4 - k) * plane]);
    }
    let a = residual_map(&yhat, &out, &gnets, &est).unwrap();
    let b = residual_map(&yhat, &rev, &gnets, &est).unwrap();
    assert_eq!(a.maps.len(), 3);
    for (x, y) in a.maps.iter().flatten().zip(b.maps.iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
    // every map is E_l minus the head mean, so a zero G gives back E_l
    let mut zero = gnets.clone();
    for n in &mut zero {
        n.params.iter_mut().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }
    let e = est.predict(&yhat).unwrap();
    let z = residual_map(&yhat, &out, &zero, &est).unwrap();
    for l in 0..3 {
        for i in 0..plane {
            assert_eq!(z.maps[l][i], e.data()[l * plane + i] as f64);
        }
    }
    assert!(residual_map(&yhat, &out.reshape(&[4, 1, 24, 24]).unwrap(), &gnets, &est).is_err());
}

#[test]
fn audit_is_reproducible_and_exports_maps() {
    let (_, noisy) = noisy_set(6, 24, NoiseSpec::Gaussian { sigma: 25.0 }, 21);
    let aux = AuxConfig::default();
    let est = tiny_estimator(&noisy, &aux, 22);
    let spec = DenoiserSpec::linear();
    let method = Method::Denoiser(TargetSource::Builtin(&spec));
    let fit = fit_g_for_denoiser(&noisy, method, &est, &aux, &tiny_audit(), 5).unwrap();
    assert!(fit.final_loss.is_finite() && fit.final_loss > 0.0);
    let held: Vec<_> = noisy[4..].iter().enumerate().map(|(i, y)| (format!("h{i}"), y.clone())).collect();
    let run = || audit_images(&held, method, "base", &fit.gnets, &est, &aux, 2, 7, "cfg").unwrap();
    let (r1, r2) = (run(), run());
    assert_eq!(r1, r2);
    assert_eq!(r1.rows.len(), 2);
    assert!(r1.rows.iter().all(|r| r.energies.len() == 3 && r.energy > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let yhat = image_tensor::<f32>(&noisy[4]);
    let out = image_tensor::<f32>(&spec.apply(&noisy[4]).unwrap());
    let maps = residual_map(&yhat, &out, &fit.gnets, &est).unwrap();
    export_residuals(dir.path(), "h0", &maps).unwrap();
    for l in 1..=3 {
        let img = load_pgm(dir.path().join(format!("h0.residual{l}.pgm"))).unwrap();
        assert_eq!(img.dims(), (24, 24));
    }
}

#[test]
fn bad_audit_configs_are_rejected() {
    for cfg in [
        AuditConfig { steps: 0, ..tiny_audit() },
        AuditConfig { draws: 0, ..tiny_audit() },
        AuditConfig { g_width: 0, ..tiny_audit() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
