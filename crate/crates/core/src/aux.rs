//! The auxiliary signal: `ŷ = discr(y + M∘r)`, `z = ŷ − y`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LevelSet, NoiseSpec};
use crate::error::{Error, Result};

/// Mean-square floor below which calibration is considered degenerate.
pub const CALIBRATION_FLOOR: f64 = 1e-12;

/// Largest allowed ratio Var(z) / noise variance for a shipped config.
pub const MAX_AUX_TO_NOISE_VARIANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "lowercase")]
pub enum RMode {
    Gaussian { std: f64 },
    Constant { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub density: f64,
    pub r: RMode,
    pub discr: bool,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            density: 1.0 / 64.0,
            r: RMode::Gaussian { std: 0.05 },
            discr: true,
        }
    }
}

impl AuxConfig {
    /// Defaults per noise family: sparse unit pulses for salt-and-pepper,
    /// small Gaussian perturbations otherwise.
    pub fn for_noise(noise: &NoiseSpec) -> Self {
        match noise {
            NoiseSpec::SaltPepper { .. } => AuxConfig {
                density: 1.0 / 256.0,
                r: RMode::Constant { value: 1.0 },
                discr: true,
            },
            _ => AuxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!("mask density {} outside (0, 1]", self.density)));
        }
        match self.r {
            RMode::Gaussian { std } if !(std > 0.0 && std.is_finite()) => {
                Err(Error::config(format!("r std {std} must be positive")))
            }
            RMode::Constant { value } if !value.is_finite() => {
                Err(Error::config("r value must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// `density · E[r²]`, the variance of the unrounded perturbation.
    pub fn z_variance(&self) -> f64 {
        let r2 = match self.r {
            RMode::Gaussian { std } => std * std,
            RMode::Constant { value } => value * value,
        };
        self.density * r2
    }

    /// Requires the perturbation to be small next to the noise.
    pub fn check_against_noise(&self, noise: &NoiseSpec) -> Result<()> {
        self.validate()?;
        let nv = noise.mid_gray_variance();
        if nv > 0.0 && self.z_variance() > MAX_AUX_TO_NOISE_VARIANCE * nv {
            return Err(Error::config(format!(
                "auxiliary variance {:.3e} is not small next to noise variance {nv:.3e}",
                self.z_variance()
            )));
        }
        Ok(())
    }

    fn draw_r<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.r {
            RMode::Gaussian { std } => {
                let s: f64 = StandardNormal.sample(rng);
                std * s
            }
            RMode::Constant { value } => value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxSample {
    pub y: Image,
    pub z: Vec<f64>,
    pub yhat: Image,
    pub mask: Vec<bool>,
}

/// Nearest level per element, ties to the lower level. Identity without levels.
pub fn discr(v: &[f64], levels: Option<&LevelSet>) -> Vec<f64> {
    match levels {
        Some(ls) => v.iter().map(|&x| ls.nearest(x)).collect(),
        None => v.to_vec(),
    }
}

/// Raw-slice core of [`make_aux`]; returns `(ŷ, z, mask)`.
///
/// `ŷ` is clamped to `[0, 1]` and, with `discr` on and levels present,
/// rounded onto the levels. `z` is the floating-point difference `ŷ − y`.
pub fn aux_values<R: Rng + ?Sized>(
    y: &[f64],
    levels: Option<&LevelSet>,
    cfg: &AuxConfig,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let levels = if cfg.discr { levels } else { None };
    let mut yhat = Vec::with_capacity(y.len());
    let mut mask = Vec::with_capacity(y.len());
    for &yi in y {
        let m = rng.random::<f64>() < cfg.density;
        let r = cfg.draw_r(rng);
        mask.push(m);
        let v = if m { (yi + r).clamp(0.0, 1.0) } else { yi };
        yhat.push(match levels {
            Some(ls) if m => ls.nearest(v),
            _ => v,
        });
    }
    let z = yhat.iter().zip(y).map(|(h, yi)| h - yi).collect();
    (yhat, z, mask)
}

pub fn make_aux<R: Rng + ?Sized>(y: &Image, cfg: &AuxConfig, rng: &mut R) -> Result<AuxSample> {
    cfg.validate()?;
    let (yhat, z, mask) = aux_values(y.data(), y.levels(), cfg, rng);
    let levels = if cfg.discr { y.levels().cloned() } else { None };
    let yhat = Image::new(y.height(), y.width(), yhat, levels)?;
    Ok(AuxSample {
        y: y.clone(),
        z,
        yhat,
        mask,
    })
}

/// `t · z^l` for `l ∈ {1, 2, 3}`.
pub fn f_scalar(z: f64, l: usize, t: f64) -> f64 {
    t * z.powi(l as i32)
}

pub fn f_apply(z: &[f64], l: usize, t: f64) -> Result<Vec<f64>> {
    if !(1..=3).contains(&l) {
        return Err(Error::config(format!("moment order {l} outside 1..=3")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("scale t = {t} must be positive")));
    }
    Ok(z.iter().map(|&v| f_scalar(v, l, t)).collect())
}

/// `t_l = 1/√m_l` from measured mean squares of the estimator outputs.
pub fn t_from_mean_squares(m: &[f64]) -> Result<Vec<f64>> {
    m.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(v >= CALIBRATION_FLOOR) || !v.is_finite() {
                Err(Error::Calibration(format!(
                    "mean square {v:e} for l = {} is below the floor {CALIBRATION_FLOOR:e}",
                    i + 1
                )))
            } else {
                Ok(1.0 / v.sqrt())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;

    #[test]
    fn f_apply_cases() {
        assert_eq!(f_apply(&[0.0], 3, 2.0).unwrap(), vec![0.0]);
        assert!((f_apply(&[-0.1], 2, 1.0).unwrap()[0] - 0.01).abs() < 1e-15);
        assert!(f_apply(&[-0.1], 3, 1.0).unwrap()[0] < 0.0);
        assert!(f_apply(&[0.1], 4, 1.0).is_err());
        assert!(f_apply(&[0.1], 1, 0.0).is_err());
    }

    #[test]
    fn discr_cases() {
        let ls = LevelSet::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(discr(&[0.74, 0.76, 0.5], Some(&ls)), vec![0.5, 1.0, 0.5]);
        let ls = LevelSet::new(vec![0.0, 0.5]).unwrap();
        assert_eq!(discr(&[0.25], Some(&ls)), vec![0.0]);
        assert_eq!(discr(&[0.3], None), vec![0.3]);
    }

    #[test]
    fn full_density_constant_r_on_eight_bit() {
        let y = Image::from_u8(1, 3, &[0, 100, 255]).unwrap();
        let cfg = AuxConfig {
            density: 1.0,
            r: RMode::Constant { value: 1.0 },
            discr: true,
        };
        let s = make_aux(&y, &cfg, &mut stage_rng(0, "t", 0)).unwrap();
        assert_eq!(s.yhat.data(), &[1.0, 1.0, 1.0]);
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn calibration_floor() {
        assert!(t_from_mean_squares(&[1e-13]).is_err());
        assert_eq!(t_from_mean_squares(&[4.0, 0.25]).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn default_configs_are_small_next_to_noise() {
        for n in [
            NoiseSpec::Gaussian { sigma: 25.0 },
            NoiseSpec::Poisson { lambda: 30.0 },
            NoiseSpec::SaltPepper { p: 0.3 },
            NoiseSpec::Mixed { lambda: 30.0, sigma: 3.0 },
        ] {
            AuxConfig::for_noise(&n).check_against_noise(&n).unwrap();
        }
    }
}
