//! PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when MSE was zero and `db` is the cap sentinel.
    pub capped: bool,
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    if mse == 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        }
    } else {
        Psnr {
            db: 10.0 * (peak * peak / mse).log10(),
            capped: false,
        }
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * data[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11×11 windows (σ = 1.5) lying inside the image.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let xx = filter_valid(&prod(x, x), h, w, &taps);
    let yy = filter_valid(&prod(y, y), h, w, &taps);
    let xy = filter_valid(&prod(x, y), h, w, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| ssim_window(mu_x[i], mu_y[i], xx[i], yy[i], xy[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

/// SSIM of one window from its weighted first and second moments.
pub fn ssim_window(mx: f64, my: f64, xx: f64, yy: f64, xy: f64, c1: f64, c2: f64) -> f64 {
    let vx = xx - mx * mx;
    let vy = yy - my * my;
    let cxy = xy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_image: Vec<MetricResult>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores each `(name, reference, test)` triple and averages.
pub fn evaluate(items: &[(String, Image, Image)], peak: f64) -> Result<MetricSummary> {
    let per_image = crate::parallel::map_slice(items, |(name, r, t)| -> Result<MetricResult> {
        Ok(MetricResult {
            name: name.clone(),
            psnr: psnr(r, t, peak)?,
            ssim: ssim(r, t, peak)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    Ok(MetricSummary {
        mean_psnr: per_image.iter().map(|m| m.psnr.db).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_image,
    })
}

impl MetricSummary {
    /// Aligned text table.
    pub fn table(&self) -> String {
        let width = self.per_image.iter().map(|m| m.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "name", "psnr_db", "ssim");
        for m in &self.per_image {
            let flag = if m.psnr.capped { "*" } else { " " };
            s.push_str(&format!(
                "{:<width$}  {:>8.3}{flag}  {:>7.4}\n",
                m.name, m.psnr.db, m.ssim
            ));
        }
        s.push_str(&format!(
            "{:<width$}  {:>8.3}   {:>7.4}\n",
            "mean", self.mean_psnr, self.mean_ssim
        ));
        if self.per_image.iter().any(|m| m.psnr.capped) {
            s.push_str(&format!("* identical images, capped at {PSNR_CAP_DB} dB\n"));
        }
        s
    }
}
