//! Base denoisers `D`: box filter, median filter, iterative mean filter, and
//! an adapter for outputs produced by external tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_pgm, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum DenoiserSpec {
    Linear {
        #[serde(default = "default_linear_window")]
        window: usize,
    },
    Median {
        #[serde(default = "default_median_window")]
        window: usize,
    },
    Imf {
        #[serde(default = "default_imf_iters")]
        max_iters: usize,
    },
    /// Precomputed outputs named `<stem>.denoised.pgm`, next to the noisy
    /// input or inside `dir` when given.
    External {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
}

fn default_linear_window() -> usize {
    5
}

fn default_median_window() -> usize {
    3
}

fn default_imf_iters() -> usize {
    10
}

impl DenoiserSpec {
    pub fn linear() -> Self {
        DenoiserSpec::Linear { window: 5 }
    }

    pub fn median() -> Self {
        DenoiserSpec::Median { window: 3 }
    }

    pub fn id(&self) -> String {
        match self {
            DenoiserSpec::Linear { window } => format!("linear{window}"),
            DenoiserSpec::Median { window } => format!("median{window}"),
            DenoiserSpec::Imf { max_iters } => format!("imf{max_iters}"),
            DenoiserSpec::External { .. } => "external".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DenoiserSpec::Linear { window } | DenoiserSpec::Median { window }
                if window < 3 || window % 2 == 0 =>
            {
                Err(Error::config(format!("filter window {window} must be odd and >= 3")))
            }
            DenoiserSpec::Imf { max_iters: 0 } => Err(Error::config("imf needs max_iters >= 1")),
            _ => Ok(()),
        }
    }

    /// Whether `D` can be evaluated on fresh inputs (false for external outputs).
    pub fn is_builtin(&self) -> bool {
        !matches!(self, DenoiserSpec::External { .. })
    }

    /// Runs a built-in filter.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        match *self {
            DenoiserSpec::Linear { window } => box_filter(img, window),
            DenoiserSpec::Median { window } => median_filter(img, window),
            DenoiserSpec::Imf { max_iters } => Ok(iterative_mean_filter(img, max_iters)),
            DenoiserSpec::External { .. } => Err(Error::config(
                "external denoiser outputs must be loaded from disk, not recomputed",
            )),
        }
    }
}

fn check_size(img: &Image, window: usize) -> Result<()> {
    if img.height() < window || img.width() < window {
        return Err(Error::config(format!(
            "{}x{} image is smaller than the {window}x{window} window",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// The 5×5 box filter used as the linear base denoiser.
pub fn linear_filter(img: &Image) -> Result<Image> {
    box_filter(img, 5)
}

/// Mean over a `window × window` neighbourhood with replicated borders.
pub fn box_filter(img: &Image, window: usize) -> Result<Image> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::config(format!("box window {window} must be odd")));
    }
    check_size(img, window)?;
    let (h, w) = img.dims();
    let r = (window / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for dj in -r..=r {
                s += img.get_clamped(i as isize, j as isize + dj);
            }
            rows[i * w + j] = s;
        }
    }
    let norm = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for di in -r..=r {
                let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                s += rows[ii * w + j];
            }
            out[i * w + j] = s / norm;
        }
    }
    Image::from_clamped(h, w, out)
}

/// Per-pixel median of a `window × window` neighbourhood, replicated borders.
pub fn median_filter(img: &Image, window: usize) -> Result<Image> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::config(format!("median window {window} must be odd and >= 3")));
    }
    check_size(img, window)?;
    let (h, w) = img.dims();
    let r = (window / 2) as isize;
    let mut buf = Vec::with_capacity(window * window);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            buf.clear();
            for di in -r..=r {
                for dj in -r..=r {
                    buf.push(img.get_clamped(i + di, j + dj));
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out.push(*m);
        }
    }
    Image::new(h, w, out, img.levels().cloned())
}

/// Replaces extreme-valued pixels (exactly 0 or 1) by the mean of their
/// non-suspect 3×3 neighbours, repeating while suspects remain. Pixels still
/// suspect after `max_iters` rounds are set to 0.5.
pub fn iterative_mean_filter(img: &Image, max_iters: usize) -> Image {
    let (h, w) = img.dims();
    let mut val = img.data().to_vec();
    let mut suspect: Vec<bool> = val.iter().map(|&v| v == 0.0 || v == 1.0).collect();
    for _ in 0..max_iters {
        let mut updates = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if !suspect[i * w + j] {
                    continue;
                }
                let (mut s, mut n) = (0.0, 0usize);
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        let k = ii * w + jj;
                        if !suspect[k] {
                            s += val[k];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    updates.push((i * w + j, s / n as f64));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (k, v) in updates {
            val[k] = v;
            suspect[k] = false;
        }
    }
    for (v, s) in val.iter_mut().zip(&suspect) {
        if *s {
            *v = 0.5;
        }
    }
    Image::new(h, w, val, None).expect("means of in-range values")
}

/// `<dir or parent>/<stem>.denoised.pgm`.
pub fn external_output_path(noisy: &Path, dir: Option<&Path>) -> PathBuf {
    let stem = noisy
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| noisy.parent().unwrap_or(Path::new("")).to_path_buf());
    base.join(format!("{stem}.denoised.pgm"))
}

/// Loads the precomputed output for `noisy_path` and checks it against `dims`.
pub fn external_denoiser(noisy_path: &Path, dir: Option<&Path>, dims: (usize, usize)) -> Result<Image> {
    let p = external_output_path(noisy_path, dir);
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    let img = load_pgm(&p)?;
    if img.dims() != dims {
        return Err(Error::shape(format!(
            "{} is {}x{}, noisy input is {}x{}",
            p.display(),
            img.height(),
            img.width(),
            dims.0,
            dims.1
        )));
    }
    Ok(img)
}
