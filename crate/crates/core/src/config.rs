//! Run configuration: TOML sections layered as preset defaults, then the
//! config file, then `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::AuditConfig;
use crate::aux::AuxConfig;
use crate::data::NoiseSpec;
use crate::denoise::DenoiserSpec;
use crate::error::{Error, Result};
use crate::train::{EstimatorConfig, RefinerConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic training images.
    pub train: usize,
    /// Synthetic held-out images, used only for evaluation and audit reports.
    pub test: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Run directory holding every artifact.
    pub out: PathBuf,
    /// Optional manifests of existing noisy images used in place of the
    /// generated ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub aux: AuxConfig,
    pub denoiser: DenoiserSpec,
    pub estimator: EstimatorConfig,
    pub refiner: RefinerConfig,
    pub audit: AuditConfig,
    pub paths: PathsConfig,
}

/// Named starting points for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Gaussian σ = 25 with the box filter.
    DeskGaussian,
    /// Salt-and-pepper p = 0.3 with the median filter.
    DeskSaltPepper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk-gaussian" => Ok(Preset::DeskGaussian),
            "desk-saltpepper" => Ok(Preset::DeskSaltPepper),
            _ => Err(Error::config(format!(
                "unknown preset {s:?} (desk-gaussian, desk-saltpepper)"
            ))),
        }
    }

    /// Preset matching a noise family.
    pub fn for_noise(noise: &NoiseSpec) -> Self {
        match noise {
            NoiseSpec::SaltPepper { .. } => Preset::DeskSaltPepper,
            _ => Preset::DeskGaussian,
        }
    }

    pub fn config(self) -> RunConfig {
        let noise = match self {
            Preset::DeskGaussian => NoiseSpec::Gaussian { sigma: 25.0 },
            Preset::DeskSaltPepper => NoiseSpec::SaltPepper { p: 0.3 },
        };
        let denoiser = match self {
            Preset::DeskGaussian => DenoiserSpec::linear(),
            Preset::DeskSaltPepper => DenoiserSpec::median(),
        };
        RunConfig {
            seed: 0,
            data: DataConfig {
                train: 200,
                test: 20,
                size: 64,
            },
            noise,
            aux: AuxConfig::for_noise(&noise),
            denoiser,
            estimator: desk_estimator(),
            refiner: desk_refiner(),
            audit: desk_audit(),
            paths: PathsConfig {
                out: PathBuf::from("run"),
                noisy_train: None,
                noisy_test: None,
            },
        }
    }
}

pub const DESK_REFINER_STEPS: usize = 20_000;
pub const DESK_GAMMA_MAX: f64 = 4.0;

fn desk_estimator() -> EstimatorConfig {
    EstimatorConfig {
        depth: 6,
        width: 32,
        steps: 4000,
        pilot_steps: 500,
        batch: 8,
        crop: 32,
        ..EstimatorConfig::default()
    }
}

fn desk_refiner() -> RefinerConfig {
    RefinerConfig {
        depth: 6,
        width: 32,
        heads: 8,
        g_width: 16,
        steps: DESK_REFINER_STEPS,
        batch: 8,
        crop: 32,
        gamma: Schedule::ramp_then_hold(DESK_GAMMA_MAX),
        ..RefinerConfig::default()
    }
}

fn desk_audit() -> AuditConfig {
    AuditConfig {
        g_width: 16,
        steps: 1500,
        batch: 8,
        crop: 32,
        ..AuditConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::DeskGaussian.config()
    }
}

fn to_toml(cfg: &RunConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("config serializes to a table")
}

/// Overlays `top` onto `base`. A table whose `kind` or `mode` tag changes
/// replaces the old table instead of merging into it.
fn merge(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !retagged(b, t) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn retagged(base: &toml::Table, top: &toml::Table) -> bool {
    ["kind", "mode"]
        .iter()
        .any(|tag| top.get(*tag).is_some_and(|t| base.get(*tag) != Some(t)))
}

/// Parses `a.b.c=value` into a nested table. The value is read as a TOML
/// value, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<toml::Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl RunConfig {
    /// Builds a config from an optional file and overrides. Without a
    /// `preset`, the noise family chosen by the file or overrides selects one.
    pub fn load(file: Option<&Path>, overrides: &[String], preset: Option<Preset>) -> Result<Self> {
        let mut user = toml::Table::new();
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::MissingFile(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path)?;
            let t: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::parse(path.display().to_string(), e.to_string()))?;
            merge(&mut user, &t);
        }
        for o in overrides {
            merge(&mut user, &parse_override(o)?);
        }
        let preset = match preset {
            Some(p) => p,
            None => {
                let mut probe = to_toml(&RunConfig::default());
                if let Some(n) = user.get("noise") {
                    merge(&mut probe, &toml::Table::from_iter([("noise".to_string(), n.clone())]));
                }
                let noise: NoiseSpec = probe["noise"]
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::parse("noise", e.to_string()))?;
                Preset::for_noise(&noise)
            }
        };
        let mut merged = to_toml(&preset.config());
        merge(&mut merged, &user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train == 0 || self.data.test == 0 || self.data.size == 0 {
            return Err(Error::config("data counts and size must be positive"));
        }
        self.noise.validate()?;
        self.aux.validate()?;
        self.aux.check_against_noise(&self.noise)?;
        self.denoiser.validate()?;
        self.estimator.validate()?;
        self.refiner.validate()?;
        self.audit.validate()?;
        for p in [&self.paths.noisy_train, &self.paths.noisy_test].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        if let DenoiserSpec::External { dir: Some(d) } = &self.denoiser {
            if !d.exists() {
                return Err(Error::MissingFile(d.clone()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON of everything except
    /// `paths`, so moving a run directory keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        let canon = serde_json::to_string(&v).expect("json");
        hex(&Sha256::digest(canon.as_bytes()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let t = parse_override("refiner.steps=12").unwrap();
        assert_eq!(t["refiner"]["steps"].as_integer(), Some(12));
        let t = parse_override("paths.out=some/dir").unwrap();
        assert_eq!(t["paths"]["out"].as_str(), Some("some/dir"));
        assert!(parse_override("nokey").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn retagging_replaces_table() {
        let cfg = RunConfig::load(None, &["noise.kind=\"poisson\"".into(), "noise.lambda=30".into()], None).unwrap();
        assert_eq!(cfg.noise, NoiseSpec::Poisson { lambda: 30.0 });
    }

    #[test]
    fn noise_family_picks_preset() {
        let cfg = RunConfig::load(None, &["noise={kind=\"saltpepper\", p=0.2}".into()], None).unwrap();
        assert_eq!(cfg.denoiser, DenoiserSpec::median());
        assert_eq!(cfg.aux.density, 1.0 / 256.0);
    }
}
