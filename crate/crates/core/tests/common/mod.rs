#![allow(dead_code)]

pub mod gradcheck;

use statrefine::aux::AuxConfig;
use statrefine::data::{gen_synthetic_dataset, Image, NoiseSpec};
use statrefine::rng::stage_rng;
use statrefine::tensor::Tensor;
use statrefine::train::{train_estimator, EstimatorConfig, Schedule, TrainedEstimator};

/// Clean synthetic images and their noisy versions stored at 8 bits.
pub fn noisy_set(count: usize, size: usize, noise: NoiseSpec, seed: u64) -> (Vec<Image>, Vec<Image>) {
    let clean = gen_synthetic_dataset(count, size, seed).unwrap();
    let noisy = clean
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = noise.apply(x, &mut stage_rng(seed, "test-noise", i as u64)).unwrap();
            Image::from_u8(size, size, &y.to_u8()).unwrap()
        })
        .collect();
    (clean, noisy)
}

pub fn tiny_estimator_config() -> EstimatorConfig {
    EstimatorConfig {
        depth: 3,
        width: 8,
        steps: 60,
        pilot_steps: 10,
        batch: 4,
        crop: 16,
        holdout_batches: 2,
        eval_every: 30,
        lr: Schedule::constant(1e-3),
        ..EstimatorConfig::default()
    }
}

pub fn tiny_estimator(train: &[Image], aux: &AuxConfig, seed: u64) -> TrainedEstimator {
    let cfg = tiny_estimator_config();
    let (fit, hold) = train.split_at(train.len() - 2);
    train_estimator(fit, hold, aux, &[1.0; 3], &cfg, seed, None).unwrap()
}

/// `[N,L,H,W]` into `L` tensors of `[N,1,H,W]`.
pub fn split_maps(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let s = t.shape();
    let (n, l, plane) = (s[0], s[1], s[2] * s[3]);
    (0..l)
        .map(|c| {
            let mut d = Vec::with_capacity(n * plane);
            for b in 0..n {
                d.extend_from_slice(&t.data()[(b * l + c) * plane..(b * l + c + 1) * plane]);
            }
            Tensor::new(vec![n, 1, s[2], s[3]], d).unwrap()
        })
        .collect()
}

/// Direct SSIM: 2-D Gaussian weights built from scratch, one window at a time.
pub fn ssim_loop(a: &Image, b: &Image, peak: f64) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = (k / 2) as f64;
    let mut wts = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            wts[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let (h, w) = a.dims();
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - k {
        for q in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    mx += wts[i * k + j] * a.get(r + i, q + j);
                    my += wts[i * k + j] * b.get(r + i, q + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (dx, dy) = (a.get(r + i, q + j) - mx, b.get(r + i, q + j) - my);
                    vx += wts[i * k + j] * dx * dx;
                    vy += wts[i * k + j] * dy * dy;
                    cxy += wts[i * k + j] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
