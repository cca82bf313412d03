use proptest::prelude::*;
use rand::Rng;
use statrefine::data::{save_pgm, Image};
use statrefine::denoise::{external_denoiser, external_output_path, DenoiserSpec};
use statrefine::rng::stage_rng;
use statrefine::Error;

fn random_image(h: usize, w: usize, seed: u64, impulses: f64) -> Image {
    let mut rng = stage_rng(seed, "den", 0);
    let data = (0..h * w)
        .map(|_| {
            if rng.random::<f64>() < impulses {
                if rng.random() {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.random_range(0.1..0.9)
            }
        })
        .collect();
    Image::new(h, w, data, None).unwrap()
}

fn margin(spec: &DenoiserSpec) -> usize {
    match *spec {
        DenoiserSpec::Linear { window } | DenoiserSpec::Median { window } => window / 2,
        DenoiserSpec::Imf { max_iters } => max_iters + 1,
        DenoiserSpec::External { .. } => unreachable!(),
    }
}

fn spec_strategy() -> impl Strategy<Value = DenoiserSpec> {
    prop_oneof![
        (1usize..4).prop_map(|k| DenoiserSpec::Linear { window: 2 * k + 1 }),
        (1usize..4).prop_map(|k| DenoiserSpec::Median { window: 2 * k + 1 }),
        (1usize..4).prop_map(|max_iters| DenoiserSpec::Imf { max_iters }),
    ]
}

proptest! {
    #[test]
    fn shifted_input_shifts_interior(spec in spec_strategy(), seed in any::<u64>()) {
        let (h, w) = (20, 20);
        let wide = random_image(h, w + 1, seed, 0.2);
        let a = spec.apply(&wide.crop(0, 0, h, w).unwrap()).unwrap();
        let b = spec.apply(&wide.crop(0, 1, h, w).unwrap()).unwrap();
        let m = margin(&spec);
        for r in m..h - m {
            for c in m..w - m - 1 {
                let (x, y) = (b.get(r, c), a.get(r, c + 1));
                prop_assert!((x - y).abs() <= 1e-12, "{:?} at ({}, {}): {} vs {}", spec, r, c, x, y);
            }
        }
    }

    #[test]
    fn outputs_stay_within_input_range(spec in spec_strategy(), seed in any::<u64>(), p in 0.0..0.6f64) {
        let img = random_image(12, 15, seed, p);
        let (lo, hi) = img.min_max();
        let out = spec.apply(&img).unwrap();
        prop_assert_eq!(out.dims(), img.dims());
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{} outside [{}, {}]", v, lo, hi);
        }
    }

    #[test]
    fn constant_images_are_fixed_points(spec in spec_strategy(), v in 0.05..0.95f64) {
        let img = Image::constant(9, 11, v).unwrap();
        let out = spec.apply(&img).unwrap();
        prop_assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-12));
    }
}

#[test]
fn even_or_small_windows_are_rejected() {
    for window in [0, 1, 2, 4] {
        assert!(DenoiserSpec::Linear { window }.validate().is_err());
        assert!(DenoiserSpec::Median { window }.validate().is_err());
    }
    let tiny = Image::constant(2, 2, 0.5).unwrap();
    assert!(DenoiserSpec::linear().apply(&tiny).is_err());
}

#[test]
fn median_removes_isolated_impulses() {
    let mut data = vec![0.4; 49];
    data[24] = 1.0;
    data[10] = 0.0;
    let img = Image::new(7, 7, data, None).unwrap();
    let out = DenoiserSpec::median().apply(&img).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.4));
}

#[test]
fn external_outputs_are_loaded_by_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = dir.path().join("img_0001.pgm");
    let expected = dir.path().join("img_0001.denoised.pgm");
    assert_eq!(external_output_path(&noisy, None), expected);
    match external_denoiser(&noisy, None, (4, 4)) {
        Err(Error::MissingFile(p)) => assert_eq!(p, expected),
        other => panic!("{other:?}"),
    }
    let img = Image::from_u8(4, 4, &[7; 16]).unwrap();
    save_pgm(&expected, &img).unwrap();
    assert_eq!(external_denoiser(&noisy, None, (4, 4)).unwrap().to_u8(), vec![7; 16]);
    assert!(external_denoiser(&noisy, None, (4, 5)).is_err());
    assert!(DenoiserSpec::External { dir: None }.apply(&img).is_err());
}
