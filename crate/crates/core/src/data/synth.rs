//! Piecewise-smooth synthetic images: a tilted gradient background with
//! rectangles, ellipses and sinusoidally textured ellipses on top.

use std::f64::consts::TAU;

use rand::Rng;

use super::image::Image;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::stage_rng;

pub fn synth_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Image {
    let s = size as f64;
    let coord = |i: usize| i as f64 / s;
    let base = rng.random_range(0.2..0.8);
    let slope = rng.random_range(-0.3..0.3);
    let dir = rng.random_range(0.0..TAU);
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (yy, xx) = (coord(i / size), coord(i % size));
            base + slope * (xx * dir.cos() + yy * dir.sin())
        })
        .collect();

    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let kind = rng.random_range(0..3);
        let v: f64 = rng.random();
        match kind {
            0 => {
                let (x0, y0): (f64, f64) = (rng.random(), rng.random());
                let (w, h) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
                for (i, p) in img.iter_mut().enumerate() {
                    let (yy, xx) = (coord(i / size), coord(i % size));
                    if xx >= x0 && xx < x0 + w && yy >= y0 && yy < y0 + h {
                        *p = v;
                    }
                }
            }
            1 => {
                let (cx, cy): (f64, f64) = (rng.random(), rng.random());
                let (rx, ry) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
                for (i, p) in img.iter_mut().enumerate() {
                    let (yy, xx) = (coord(i / size), coord(i % size));
                    if ((xx - cx) / rx).powi(2) + ((yy - cy) / ry).powi(2) < 1.0 {
                        *p = v;
                    }
                }
            }
            _ => {
                let (cx, cy): (f64, f64) = (rng.random(), rng.random());
                let (rx, ry) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3));
                let freq = rng.random_range(5.0..20.0);
                let th = rng.random_range(0.0..TAU);
                for (i, p) in img.iter_mut().enumerate() {
                    let (yy, xx) = (coord(i / size), coord(i % size));
                    if ((xx - cx) / rx).powi(2) + ((yy - cy) / ry).powi(2) < 1.0 {
                        let tex = 0.5 + 0.5 * (TAU * freq * (xx * th.cos() + yy * th.sin())).sin();
                        *p = 0.5 * v + 0.4 * tex;
                    }
                }
            }
        }
    }
    let bytes: Vec<u8> = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image::from_u8(size, size, &bytes).expect("valid 8-bit image")
}

/// `count` square 8-bit images; image `i` depends only on `(seed, i)`.
pub fn gen_synthetic_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if count == 0 || size == 0 {
        return Err(Error::config("dataset count and size must be positive"));
    }
    Ok(parallel::map_indices(count, |i| {
        synth_image(size, &mut stage_rng(seed, "synth", i as u64))
    }))
}
