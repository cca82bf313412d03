//! Noise-consistency audit of a fixed denoiser or a trained refiner.
//!
//! Consistency nets are fitted against the frozen estimator with the method's
//! outputs held fixed, then per-pixel residuals `E_l − (1/K) Σ_k G_l(R_k, ŷ)`
//! are measured on held-out images. Nothing here takes clean images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aux::{aux_values, AuxConfig};
use crate::data::{save_pgm, Image};
use crate::error::{Error, Result};
use crate::nets::{Arch, FinalInit, Net};
use crate::parallel;
use crate::rng::{derive_seed, stage_rng};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use crate::train::{
    check_finite, consistency_means, image_tensor, loss_l2, sample_batch, split_channels, Schedule,
    TargetSource, TrainedEstimator,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub g_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: Schedule,
    /// Auxiliary draws averaged per held-out image.
    pub draws: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            g_width: 32,
            steps: 2000,
            batch: 16,
            crop: 32,
            lr: Schedule::default_lr(),
            draws: 4,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        Arch::Consistency { width: self.g_width }.validate()?;
        if self.steps == 0 || self.batch == 0 || self.draws == 0 {
            return Err(Error::config("audit steps, batch and draws must be positive"));
        }
        self.lr.validate("audit lr", false)
    }
}

/// What is being audited.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    /// A fixed denoiser: one output per pixel (a point-mass posterior).
    Denoiser(TargetSource<'a>),
    /// A trained refiner with its K heads.
    Refiner(&'a Net<f32>),
}

/// `(outputs [N,K,H,W], ŷ [N,1,H,W], estimates [N,L,H,W])`.
pub type FitSample = (Tensor<f32>, Tensor<f32>, Tensor<f32>);

/// Minimises `L2` (with `λ = 1`) over `ω` alone. Returns the last-step loss.
pub fn fit_consistency(
    gnets: &mut [Net<f32>],
    steps: usize,
    lr: &Schedule,
    sample: &dyn Fn(usize) -> Result<FitSample>,
) -> Result<f64> {
    let mut opts: Vec<Adam<f32>> = gnets
        .iter()
        .map(|n| Adam::new(&n.params, AdamConfig::default()))
        .collect();
    let mut last = f64::NAN;
    for step in 0..steps {
        let (outputs, yhat, est) = sample(step)?;
        let l = est.dims4()?[1];
        if l != gnets.len() {
            return Err(Error::shape(format!("{l} estimates for {} nets", gnets.len())));
        }
        let mut g = Graph::new();
        let r = g.constant(outputs);
        let x = g.constant(yhat);
        let omega: Vec<_> = gnets.iter().map(|net| net.bind(&mut g)).collect();
        let means = consistency_means(&mut g, gnets, &omega, r, x)?;
        let est_vars: Vec<_> = split_channels(&est)?.into_iter().map(|t| g.constant(t)).collect();
        let (loss, _) = loss_l2(&mut g, &means, &est_vars, 1.0)?;
        last = g.value(loss).item() as f64;
        check_finite(step, "consistency fit loss", last)?;
        let mut grads = g.backward(loss)?;
        let lrv = lr.at(step, steps);
        for ((net, opt), vars) in gnets.iter_mut().zip(&mut opts).zip(&omega) {
            let gs: Vec<_> = vars
                .iter()
                .zip(&net.params)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.step(&mut net.params, &gs, lrv)?;
        }
    }
    Ok(last)
}

#[derive(Clone, Debug)]
pub struct FittedConsistency {
    pub gnets: Vec<Net<f32>>,
    pub final_loss: f64,
}

/// Fits `G_{ω,l}` for a method on noisy training images.
pub fn fit_g_for_denoiser(
    train: &[Image],
    method: Method<'_>,
    est: &TrainedEstimator,
    aux: &AuxConfig,
    cfg: &AuditConfig,
    seed: u64,
) -> Result<FittedConsistency> {
    cfg.validate()?;
    let l = est.t.len();
    let mut gnets = (0..l)
        .map(|i| {
            Net::init(
                Arch::Consistency { width: cfg.g_width },
                derive_seed(seed, "audit-consistency", i as u64),
                FinalInit::Small,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = |step: usize| -> Result<FitSample> {
        let targets = match method {
            Method::Denoiser(src) => Some(src),
            Method::Refiner(_) => None,
        };
        let b = sample_batch::<f32>(train, aux, targets, cfg.crop, cfg.batch, seed, "audit-batch", step)?;
        let outputs = match method {
            Method::Denoiser(_) => b.target.clone().expect("requested targets"),
            Method::Refiner(net) => net.eval(&b.yhat)?,
        };
        let e = est.predict(&b.yhat)?;
        Ok((outputs, b.yhat, e))
    };
    let final_loss = fit_consistency(&mut gnets, cfg.steps, &cfg.lr, &sample)?;
    Ok(FittedConsistency { gnets, final_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMaps {
    pub height: usize,
    pub width: usize,
    /// One map per moment order, row-major.
    pub maps: Vec<Vec<f64>>,
    /// `mean(r_l²)` per map.
    pub energies: Vec<f64>,
}

impl ResidualMaps {
    /// Mean of the per-`l` energies.
    pub fn energy(&self) -> f64 {
        self.energies.iter().sum::<f64>() / self.energies.len().max(1) as f64
    }
}

/// `r_l = E_l(ŷ) − (1/K) Σ_k G_l(R_k, ŷ)` for one image.
///
/// `outputs` is `[1,K,H,W]` and `yhat` is `[1,1,H,W]`.
pub fn residual_map(
    yhat: &Tensor<f32>,
    outputs: &Tensor<f32>,
    gnets: &[Net<f32>],
    est: &TrainedEstimator,
) -> Result<ResidualMaps> {
    let [n, _, h, w] = yhat.dims4()?;
    let [no, _, ho, wo] = outputs.dims4()?;
    if n != 1 || no != 1 || (h, w) != (ho, wo) {
        return Err(Error::shape(format!("ŷ {:?} vs outputs {:?}", yhat.shape(), outputs.shape())));
    }
    let e = est.predict(yhat)?;
    if e.dims4()?[1] != gnets.len() {
        return Err(Error::shape("estimator outputs do not match consistency nets"));
    }
    let mut g = Graph::new();
    let r = g.constant(outputs.clone());
    let x = g.constant(yhat.clone());
    let omega: Vec<_> = gnets.iter().map(|net| net.bind_frozen(&mut g)).collect();
    let means = consistency_means(&mut g, gnets, &omega, r, x)?;
    let plane = h * w;
    let mut maps = Vec::with_capacity(gnets.len());
    for (l, m) in means.iter().enumerate() {
        let gm = g.value(*m).data();
        let el = &e.data()[l * plane..(l + 1) * plane];
        maps.push(el.iter().zip(gm).map(|(&a, &b)| (a - b) as f64).collect::<Vec<_>>());
    }
    let energies = maps
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>() / plane as f64)
        .collect();
    Ok(ResidualMaps {
        height: h,
        width: w,
        maps,
        energies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub energies: Vec<f64>,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub method: String,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub aggregate: f64,
}

impl ConsistencyReport {
    pub fn from_rows(method: impl Into<String>, config_hash: impl Into<String>, rows: Vec<ReportRow>) -> Self {
        let aggregate = rows.iter().map(|r| r.energy).sum::<f64>() / rows.len().max(1) as f64;
        ConsistencyReport {
            method: method.into(),
            config_hash: config_hash.into(),
            rows,
            aggregate,
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("# method {} config {}\n", self.method, self.config_hash);
        s.push_str(&format!("{:<width$}  {:>12}", "image", "energy"));
        let l = self.rows.first().map_or(0, |r| r.energies.len());
        for i in 0..l {
            s.push_str(&format!("  {:>12}", format!("l{}", i + 1)));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<width$}  {:>12.5e}", r.name, r.energy));
            for e in &r.energies {
                s.push_str(&format!("  {e:>12.5e}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<width$}  {:>12.5e}\n", "aggregate", self.aggregate));
        s
    }
}

/// Method outputs `[1,K,H,W]` for one `ŷ`.
fn method_outputs(method: Method<'_>, yhat: &Image, index: usize) -> Result<Tensor<f32>> {
    match method {
        Method::Denoiser(TargetSource::Builtin(spec)) => Ok(image_tensor(&spec.apply(yhat)?)),
        Method::Denoiser(TargetSource::Fixed(outs)) => {
            let o = outs
                .get(index)
                .ok_or_else(|| Error::config(format!("no denoiser output for image {index}")))?;
            if o.dims() != yhat.dims() {
                return Err(Error::shape("denoiser output does not match image"));
            }
            Ok(image_tensor(o))
        }
        Method::Refiner(net) => net.eval(&image_tensor(yhat)),
    }
}

/// Residual energies of `method` on each named held-out image, averaged over
/// `draws` auxiliary samples per image.
#[allow(clippy::too_many_arguments)]
pub fn audit_images(
    images: &[(String, Image)],
    method: Method<'_>,
    method_id: &str,
    gnets: &[Net<f32>],
    est: &TrainedEstimator,
    aux: &AuxConfig,
    draws: usize,
    seed: u64,
    config_hash: &str,
) -> Result<ConsistencyReport> {
    let rows = parallel::map_indices(images.len(), |i| -> Result<ReportRow> {
        let (name, y) = &images[i];
        let mut acc = vec![0.0; gnets.len()];
        for d in 0..draws.max(1) {
            let mut rng = stage_rng(seed, "audit-aux", (i * draws.max(1) + d) as u64);
            let (yh, _, _) = aux_values(y.data(), y.levels(), aux, &mut rng);
            let yh = Image::new(y.height(), y.width(), yh, None)?;
            let out = method_outputs(method, &yh, i)?;
            let rm = residual_map(&image_tensor(&yh), &out, gnets, est)?;
            acc.iter_mut().zip(&rm.energies).for_each(|(a, e)| *a += e);
        }
        acc.iter_mut().for_each(|a| *a /= draws.max(1) as f64);
        Ok(ReportRow {
            name: name.clone(),
            energy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
            energies: acc,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyReport::from_rows(method_id, config_hash, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Images where `a` has the lower energy.
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    /// `aggregate(b) / aggregate(a)`.
    pub ratio: f64,
}

impl Comparison {
    pub fn b_win_fraction(&self) -> f64 {
        self.b_wins as f64 / (self.a_wins + self.b_wins + self.ties).max(1) as f64
    }
}

pub fn compare_reports(a: &ConsistencyReport, b: &ConsistencyReport) -> Result<Comparison> {
    if a.config_hash != b.config_hash {
        return Err(Error::config(format!(
            "reports come from different configs ({} vs {})",
            a.config_hash, b.config_hash
        )));
    }
    if a.rows.len() != b.rows.len() || a.rows.iter().zip(&b.rows).any(|(x, y)| x.name != y.name) {
        return Err(Error::config("reports cover different images"));
    }
    let (mut aw, mut bw, mut t) = (0, 0, 0);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        match x.energy.partial_cmp(&y.energy) {
            Some(std::cmp::Ordering::Less) => aw += 1,
            Some(std::cmp::Ordering::Greater) => bw += 1,
            _ => t += 1,
        }
    }
    let ratio = if a.aggregate == b.aggregate {
        1.0
    } else {
        b.aggregate / a.aggregate
    };
    Ok(Comparison {
        a_wins: aw,
        b_wins: bw,
        ties: t,
        ratio,
    })
}

/// Display image of a residual map: zero at mid-gray, ±3·RMS at the extremes.
pub fn residual_display(map: &[f64], height: usize, width: usize) -> Result<Image> {
    let rms = (map.iter().map(|v| v * v).sum::<f64>() / map.len().max(1) as f64).sqrt();
    let span = if rms > 0.0 { 6.0 * rms } else { 1.0 };
    Image::from_clamped(height, width, map.iter().map(|v| 0.5 + v / span).collect())
}

pub fn export_residuals(dir: &Path, stem: &str, maps: &ResidualMaps) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (l, m) in maps.maps.iter().enumerate() {
        let img = residual_display(m, maps.height, maps.width)?;
        save_pgm(dir.join(format!("{stem}.residual{}.pgm", l + 1)), &img)?;
    }
    Ok(())
}
