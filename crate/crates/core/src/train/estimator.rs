use serde::{Deserialize, Serialize};

use super::batch::{sample_batch, Batch};
use super::schedule::Schedule;
use super::{append_log, check_finite};
use crate::aux::{f_scalar, t_from_mean_squares, AuxConfig};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nets::{Arch, FinalInit, Net};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub depth: usize,
    pub width: usize,
    /// Number of moment functions `L`.
    pub moments: usize,
    pub steps: usize,
    pub pilot_steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: Schedule,
    /// Held-out batches used for calibration and validation.
    pub holdout_batches: usize,
    pub eval_every: usize,
    /// Rescale output channels after training so held-out mean squares are 1.
    pub renormalize: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            depth: 8,
            width: 48,
            moments: 3,
            steps: 4000,
            pilot_steps: 500,
            batch: 16,
            crop: 32,
            lr: Schedule {
                pieces: vec![
                    super::schedule::Piece::constant(0.6, 1e-3),
                    super::schedule::Piece::constant(1.0, 1e-4),
                ],
            },
            holdout_batches: 4,
            eval_every: 250,
            renormalize: true,
        }
    }
}

impl EstimatorConfig {
    pub fn arch(&self) -> Arch {
        Arch::Estimator {
            depth: self.depth,
            width: self.width,
            outputs: self.moments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if !(1..=3).contains(&self.moments) {
            return Err(Error::config("estimator moments must be 1..=3"));
        }
        if self.steps == 0 || self.batch == 0 || self.holdout_batches == 0 {
            return Err(Error::config("estimator steps, batch and holdout must be positive"));
        }
        self.lr.validate("estimator lr", false)
    }
}

/// A trained estimator with the scales `t_l` its outputs refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEstimator {
    pub net: Net<f32>,
    pub t: Vec<f64>,
    /// `(step, held-out loss)` pairs.
    pub curve: Vec<(usize, f64)>,
    /// Held-out mean squares of each output after training.
    pub mean_squares: Vec<f64>,
}

impl TrainedEstimator {
    /// `E(ŷ)` for `[N,1,H,W]` input, `[N,L,H,W]` output.
    pub fn predict(&self, yhat: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.eval(yhat)
    }
}

/// `[N,L,H,W]` targets `t_l z^l`.
pub fn moment_targets(z: &Tensor<f32>, t: &[f64]) -> Result<Tensor<f32>> {
    let [n, c, h, w] = match *z.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape(format!("z must be [N,1,H,W], got {:?}", z.shape()))),
    };
    if c != 1 {
        return Err(Error::shape("z must have one channel"));
    }
    let plane = h * w;
    let l = t.len();
    let mut out = Vec::with_capacity(n * l * plane);
    for b in 0..n {
        let zs = &z.data()[b * plane..(b + 1) * plane];
        for (i, &ti) in t.iter().enumerate() {
            out.extend(zs.iter().map(|&v| f_scalar(v as f64, i + 1, ti) as f32));
        }
    }
    Tensor::new(vec![n, l, h, w], out)
}

/// `Σ_l mean (E_l − t_l z^l)²` on one batch, without gradients.
pub fn estimator_loss(net: &Net<f32>, batch: &Batch<f32>, t: &[f64]) -> Result<f64> {
    let out = net.eval(&batch.yhat)?;
    let tgt = moment_targets(&batch.z, t)?;
    let s: f64 = out
        .data()
        .iter()
        .zip(tgt.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(s / out.len() as f64 * t.len() as f64)
}

/// Per-output `mean(E_l²)` over the given batches.
pub fn measure_mean_squares(net: &Net<f32>, batches: &[Batch<f32>]) -> Result<Vec<f64>> {
    let l = match net.arch {
        Arch::Estimator { outputs, .. } => outputs,
        _ => return Err(Error::config("not an estimator")),
    };
    let mut acc = vec![0.0; l];
    let mut count = 0usize;
    for b in batches {
        let out = net.eval(&b.yhat)?;
        let [n, _, h, w] = out.dims4()?;
        let plane = h * w;
        for s in 0..n {
            for (c, a) in acc.iter_mut().enumerate() {
                let sl = &out.data()[(s * l + c) * plane..(s * l + c + 1) * plane];
                *a += sl.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            }
        }
        count += n * plane;
    }
    Ok(acc.into_iter().map(|a| a / count.max(1) as f64).collect())
}

/// Scales output channel `l` of the last layer by `c[l]`.
pub fn scale_outputs(net: &mut Net<f32>, c: &[f64]) -> Result<()> {
    let n = net.params.len();
    let (w, b) = (n - 2, n - 1);
    let out = net.params[w].shape()[0];
    if out != c.len() {
        return Err(Error::shape(format!("{} factors for {out} outputs", c.len())));
    }
    let per = net.params[w].len() / out;
    for (o, &f) in c.iter().enumerate() {
        net.params[w].data_mut()[o * per..(o + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= f as f32);
        net.params[b].data_mut()[o] *= f as f32;
    }
    Ok(())
}

/// Adam on `Σ_l mean (E_l − t_l z^l)²` with batches from `sample(step)`.
/// Returns the held-out curve.
pub fn fit_estimator(
    net: &mut Net<f32>,
    t: &[f64],
    cfg: &EstimatorConfig,
    steps: usize,
    sample: &dyn Fn(usize) -> Result<Batch<f32>>,
    holdout: &[Batch<f32>],
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<Vec<(usize, f64)>> {
    let mut opt = Adam::new(&net.params, AdamConfig::default());
    let mut curve = Vec::new();
    let eval = |net: &Net<f32>| -> Result<f64> {
        let mut s = 0.0;
        for b in holdout {
            s += estimator_loss(net, b, t)?;
        }
        Ok(s / holdout.len().max(1) as f64)
    };
    for step in 0..steps {
        let lr = cfg.lr.at(step, steps);
        let batch = sample(step)?;
        let tgt = moment_targets(&batch.z, t)?;
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let x = g.constant(batch.yhat);
        let y = g.constant(tgt);
        let out = net.forward(&mut g, &p, x)?;
        let d = g.sub(out, y)?;
        let sq = g.pow_int(d, 2);
        let m = g.mean(sq);
        let loss = g.scale(m, t.len() as f32);
        let lv = g.value(loss).item() as f64;
        check_finite(step, "estimator loss", lv)?;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = p
            .iter()
            .map(|&v| grads.take(v).expect("parameter gradient"))
            .collect();
        opt.step(&mut net.params, &gs, lr)?;
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step + 1 == steps {
            let h = if holdout.is_empty() { f64::NAN } else { eval(net)? };
            curve.push((step, h));
            if let Some(w) = log.as_deref_mut() {
                append_log(
                    w,
                    &serde_json::json!({
                        "stage": "estimator", "step": step, "lr": lr,
                        "loss": lv, "holdout": h,
                    }),
                )?;
            }
        }
    }
    Ok(curve)
}

fn holdout_set(
    images: &[Image],
    aux: &AuxConfig,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<Batch<f32>>> {
    (0..cfg.holdout_batches)
        .map(|i| sample_batch(images, aux, None, cfg.crop, cfg.batch, seed, "estimator-holdout", i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub t: Vec<f64>,
    pub pilot_mean_squares: Vec<f64>,
}

/// Pilot-trains with `t = 1`, measures held-out `m_l`, returns `t_l = 1/√m_l`.
pub fn calibrate_t(
    train: &[Image],
    holdout: &[Image],
    aux: &AuxConfig,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<Calibration> {
    cfg.validate()?;
    let ones = vec![1.0; cfg.moments];
    let mut pilot = Net::init(cfg.arch(), crate::rng::derive_seed(seed, "pilot", 0), FinalInit::Small)?;
    let sample = |s: usize| sample_batch(train, aux, None, cfg.crop, cfg.batch, seed, "pilot-batch", s);
    fit_estimator(&mut pilot, &ones, cfg, cfg.pilot_steps, &sample, &[], None)?;
    let ho = holdout_set(holdout, aux, cfg, seed)?;
    let m = measure_mean_squares(&pilot, &ho)?;
    Ok(Calibration {
        t: t_from_mean_squares(&m)?,
        pilot_mean_squares: m,
    })
}

/// Trains `E` towards `t_l z^l`. With `renormalize`, the output channels and
/// `t` are rescaled together at the end so held-out mean squares equal 1.
pub fn train_estimator(
    train: &[Image],
    holdout: &[Image],
    aux: &AuxConfig,
    t: &[f64],
    cfg: &EstimatorConfig,
    seed: u64,
    log: Option<&mut dyn std::io::Write>,
) -> Result<TrainedEstimator> {
    cfg.validate()?;
    if t.len() != cfg.moments {
        return Err(Error::config(format!("{} scales for {} moments", t.len(), cfg.moments)));
    }
    let mut net = Net::init(cfg.arch(), seed, FinalInit::Small)?;
    let sample = |s: usize| sample_batch(train, aux, None, cfg.crop, cfg.batch, seed, "estimator-batch", s);
    let ho = holdout_set(holdout, aux, cfg, seed)?;
    let curve = fit_estimator(&mut net, t, cfg, cfg.steps, &sample, &ho, log)?;
    let mut t = t.to_vec();
    let mut m = measure_mean_squares(&net, &ho)?;
    if cfg.renormalize {
        let c: Vec<f64> = t_from_mean_squares(&m)?;
        scale_outputs(&mut net, &c)?;
        t.iter_mut().zip(&c).for_each(|(ti, ci)| *ti *= ci);
        m = measure_mean_squares(&net, &ho)?;
    }
    Ok(TrainedEstimator {
        net,
        t,
        curve,
        mean_squares: m,
    })
}

pub const ESTIMATOR_FILE: &str = "estimator.srck";
pub const ESTIMATOR_META: &str = "estimator.json";

#[derive(Serialize, Deserialize)]
struct EstimatorMeta {
    t: Vec<f64>,
    mean_squares: Vec<f64>,
    curve: Vec<(usize, f64)>,
}

/// Network weights plus a JSON sidecar with `t` and the training curve.
pub fn save_estimator(dir: &std::path::Path, est: &TrainedEstimator) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::tensor::save_checkpoint(&dir.join(ESTIMATOR_FILE), &est.net.to_checkpoint())?;
    let meta = EstimatorMeta {
        t: est.t.clone(),
        mean_squares: est.mean_squares.clone(),
        curve: est.curve.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.into()))?;
    crate::tensor::write_atomic(&dir.join(ESTIMATOR_META), text.as_bytes())
}

pub fn load_estimator(dir: &std::path::Path) -> Result<TrainedEstimator> {
    let net = Net::from_checkpoint(&crate::tensor::load_checkpoint(&dir.join(ESTIMATOR_FILE))?)?;
    let meta_path = dir.join(ESTIMATOR_META);
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let meta: EstimatorMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?;
    match net.arch {
        Arch::Estimator { outputs, .. } if outputs == meta.t.len() => {}
        _ => return Err(Error::config("estimator checkpoint does not match its scales")),
    }
    Ok(TrainedEstimator {
        net,
        t: meta.t,
        curve: meta.curve,
        mean_squares: meta.mean_squares,
    })
}
