use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::image::{Image, LevelSet};
use crate::error::{Error, Result};

/// Fraction of clamped pixels above which a warning is logged.
pub const CLAMP_WARN_FRACTION: f64 = 0.01;

/// Poisson outputs keep a level set only when it has at most this many levels.
const MAX_POISSON_LEVELS: f64 = 65_536.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// `sigma` is relative to 256 intensity levels.
    Gaussian { sigma: f64 },
    Poisson { lambda: f64 },
    #[serde(rename = "saltpepper")]
    SaltPepper { p: f64 },
    Mixed { lambda: f64, sigma: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseSpec::Poisson { lambda } => lambda > 0.0 && lambda.is_finite(),
            NoiseSpec::SaltPepper { p } => (0.0..=1.0).contains(&p),
            NoiseSpec::Mixed { lambda, sigma } => {
                lambda > 0.0 && lambda.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid noise parameters {self:?}")))
        }
    }

    /// Per-pixel noise variance on a mid-gray (0.5) image.
    pub fn mid_gray_variance(&self) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => (sigma / 256.0).powi(2),
            NoiseSpec::Poisson { lambda } => 0.5 / lambda,
            NoiseSpec::SaltPepper { p } => p * 0.25,
            NoiseSpec::Mixed { lambda, sigma } => 0.5 / lambda + (sigma / 256.0).powi(2),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Result<Image> {
        self.validate()?;
        match *self {
            NoiseSpec::Gaussian { sigma } => add_gaussian(x, sigma, rng),
            NoiseSpec::Poisson { lambda } => add_poisson(x, lambda, rng),
            NoiseSpec::SaltPepper { p } => add_salt_pepper(x, p, rng),
            NoiseSpec::Mixed { lambda, sigma } => add_mixed(x, lambda, sigma, rng),
        }
    }
}

fn clamp_and_report(data: &mut [f64], hi: f64, what: &str) -> usize {
    let mut n = 0;
    for v in data.iter_mut() {
        if *v < 0.0 || *v > hi {
            *v = v.clamp(0.0, hi);
            n += 1;
        }
    }
    if n as f64 > CLAMP_WARN_FRACTION * data.len() as f64 {
        log::warn!(
            "{what}: clamped {n} of {} pixels ({:.2}%)",
            data.len(),
            100.0 * n as f64 / data.len() as f64
        );
    }
    n
}

/// `y = clamp(x + n)`, `n ~ N(0, (sigma/256)^2)` i.i.d. The result is continuous.
pub fn add_gaussian<R: Rng + ?Sized>(x: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("gaussian sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma / 256.0).map_err(|e| Error::config(e.to_string()))?;
    let mut data = x.data().to_vec();
    data.iter_mut().for_each(|v| *v += normal.sample(rng));
    clamp_and_report(&mut data, 1.0, "gaussian");
    Image::new(x.height(), x.width(), data, None)
}

/// `y = Poisson(lambda x) / lambda`, clamped to `[0, 1]`.
pub fn add_poisson<R: Rng + ?Sized>(x: &Image, lambda: f64, rng: &mut R) -> Result<Image> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("poisson lambda {lambda} must be positive")));
    }
    let mut data = x.data().to_vec();
    for v in data.iter_mut() {
        let rate = lambda * *v;
        *v = if rate > 0.0 {
            let d = Poisson::new(rate).map_err(|e| Error::config(e.to_string()))?;
            d.sample(rng) / lambda
        } else {
            0.0
        };
    }
    clamp_and_report(&mut data, 1.0, "poisson");
    let levels = (lambda <= MAX_POISSON_LEVELS).then(|| poisson_levels(lambda));
    Image::new(x.height(), x.width(), data, levels)
}

/// `{k / lambda : k / lambda < 1} ∪ {1}`, the values a clamped Poisson output can take.
pub fn poisson_levels(lambda: f64) -> LevelSet {
    let mut v: Vec<f64> = (0..)
        .map(|k| k as f64 / lambda)
        .take_while(|&l| l < 1.0)
        .collect();
    v.push(1.0);
    LevelSet::new(v).expect("finite levels")
}

/// Each pixel is replaced with probability `p` by 0 or 1 with equal odds.
pub fn add_salt_pepper<R: Rng + ?Sized>(x: &Image, p: f64, rng: &mut R) -> Result<Image> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("salt-and-pepper p {p} outside [0, 1]")));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < p {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect();
    let levels = x.levels().map(|l| l.union(&[0.0, 1.0]));
    Image::new(x.height(), x.width(), data, levels)
}

/// Poisson step followed by additive Gaussian.
pub fn add_mixed<R: Rng + ?Sized>(x: &Image, lambda: f64, sigma: f64, rng: &mut R) -> Result<Image> {
    let y = add_poisson(x, lambda, rng)?;
    if sigma == 0.0 {
        return Ok(y);
    }
    add_gaussian(&y, sigma, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;

    #[test]
    fn identities() {
        let x = Image::from_u8(2, 2, &[0, 10, 200, 255]).unwrap();
        let mut rng = stage_rng(0, "t", 0);
        assert_eq!(add_gaussian(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(add_salt_pepper(&x, 0.0, &mut rng).unwrap().data(), x.data());
        let p = add_poisson(&x, 30.0, &mut rng).unwrap();
        assert_eq!(p.data()[0], 0.0);
        assert!(add_poisson(&x, 0.0, &mut rng).is_err());
        assert!(add_salt_pepper(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mixed_with_zero_sigma_is_poisson() {
        let x = Image::constant(8, 8, 0.4).unwrap();
        let a = add_poisson(&x, 20.0, &mut stage_rng(1, "t", 0)).unwrap();
        let b = add_mixed(&x, 20.0, 0.0, &mut stage_rng(1, "t", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_output_on_its_levels() {
        let x = Image::constant(16, 16, 0.5).unwrap();
        let y = add_poisson(&x, 7.0, &mut stage_rng(2, "t", 0)).unwrap();
        let ls = y.levels().unwrap();
        assert!(y.data().iter().all(|&v| ls.contains(v)));
    }
}
