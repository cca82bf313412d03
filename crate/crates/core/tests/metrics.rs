mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrefine::data::Image;
use statrefine::metrics::{evaluate, mse, psnr, psnr_from_mse, ssim, PSNR_CAP_DB};
use statrefine::rng::stage_rng;

use common::ssim_loop;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = stage_rng(seed, "metric", 0);
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect(), None).unwrap()
}

fn perturbed(img: &Image, std: f64, seed: u64) -> Image {
    let mut rng = stage_rng(seed, "perturb", 0);
    let n = Normal::new(0.0, std).unwrap();
    Image::new(
        img.height(),
        img.width(),
        img.data().iter().map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect(),
        None,
    )
    .unwrap()
}

#[test]
fn psnr_closed_forms() {
    assert_eq!(psnr_from_mse(0.01, 1.0).db, 20.0);
    assert_eq!(psnr_from_mse(255.0 * 255.0 / 100.0, 255.0).db, 20.0);
    let p = psnr_from_mse(0.0, 1.0);
    assert!(p.capped && p.db == PSNR_CAP_DB);
    let a = Image::constant(4, 4, 0.2).unwrap();
    let b = Image::constant(4, 4, 0.3).unwrap();
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b, 1.0).unwrap().db - 20.0).abs() < 1e-12);
    assert!(psnr(&a, &Image::constant(4, 5, 0.3).unwrap(), 1.0).is_err());
}

#[test]
fn ssim_matches_direct_loop() {
    for seed in 0..4 {
        let a = random_image(24, 19, seed);
        let b = perturbed(&a, 0.1, seed);
        let fast = ssim(&a, &b, 1.0).unwrap();
        let slow = ssim_loop(&a, &b, 1.0);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
    assert!(ssim(&Image::constant(10, 30, 0.1).unwrap(), &Image::constant(10, 30, 0.1).unwrap(), 1.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = random_image(32, 32, 9);
    let dbs: Vec<f64> = [0.01, 0.05, 0.2]
        .iter()
        .map(|&s| psnr(&a, &perturbed(&a, s, 3), 1.0).unwrap().db)
        .collect();
    assert!(dbs[0] > dbs[1] && dbs[1] > dbs[2], "{dbs:?}");
}

#[test]
fn evaluate_averages_rows() {
    let a = random_image(16, 16, 1);
    let b = perturbed(&a, 0.05, 2);
    let items = vec![("x".to_string(), a.clone(), b.clone()), ("y".to_string(), a.clone(), a.clone())];
    let s = evaluate(&items, 1.0).unwrap();
    let want = (psnr(&a, &b, 1.0).unwrap().db + PSNR_CAP_DB) / 2.0;
    assert!((s.mean_psnr - want).abs() < 1e-12);
    assert!(s.per_image[1].psnr.capped && !s.per_image[0].psnr.capped);
    assert!(s.table().contains('*'));
}

proptest! {
    #[test]
    fn symmetric_and_self_identical(seed in any::<u64>(), std in 0.001..0.3f64) {
        let a = random_image(14, 13, seed);
        let b = perturbed(&a, std, seed ^ 1);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_eight_bit_images_have_nonnegative_psnr(
        x in prop::collection::vec(any::<u8>(), 16),
        y in prop::collection::vec(any::<u8>(), 16),
    ) {
        prop_assume!(x != y);
        let a = Image::from_u8(4, 4, &x).unwrap();
        let b = Image::from_u8(4, 4, &y).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!(p.db >= 0.0 && !p.capped);
    }
}
