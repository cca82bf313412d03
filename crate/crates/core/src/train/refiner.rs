use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batch::{image_tensor, sample_batch, TargetSource};
use super::estimator::TrainedEstimator;
use super::loss::{loss_l1, loss_l2, rescale_gradient_batched, LossBreakdown};
use super::schedule::Schedule;
use super::{append_log, check_finite};
use crate::aux::{aux_values, AuxConfig};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nets::{Arch, FinalInit, Net};
use crate::rng::{derive_seed, stage_rng};
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub g_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lambda: f64,
    pub lr: Schedule,
    pub gamma: Schedule,
    /// Off: `θ` receives the plain sum `g1 + g2` and `gamma` is unused.
    #[serde(default = "yes")]
    pub rescale: bool,
    pub final_init: FinalInit,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            depth: 8,
            width: 48,
            heads: 64,
            g_width: 32,
            steps: 20_000,
            batch: 16,
            crop: 32,
            lambda: 1.0,
            lr: Schedule::default_lr(),
            gamma: Schedule::ramp_then_hold(1.5),
            rescale: true,
            final_init: FinalInit::Small,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

fn yes() -> bool {
    true
}

impl RefinerConfig {
    pub fn arch(&self) -> Arch {
        Arch::Refiner {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
        }
    }

    pub fn g_arch(&self) -> Arch {
        Arch::Consistency {
            width: self.g_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.g_arch().validate()?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("refiner steps and batch must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        self.lr.validate("refiner lr", false)?;
        self.gamma.validate("gamma", true)
    }
}

/// Gradients and losses of one refiner step.
#[derive(Clone, Debug)]
pub struct StepGrads<F> {
    pub theta: Vec<Tensor<F>>,
    pub omega: Vec<Vec<Tensor<F>>>,
    pub l1: f64,
    pub l2: f64,
    pub l2_terms: Vec<f64>,
    /// `∂L1/∂R`, `∂L2/∂R` and the rescaled `g` actually sent into `θ`.
    pub g1: Tensor<F>,
    pub g2: Tensor<F>,
    pub g: Tensor<F>,
}

/// Builds `(1/K) Σ_k G_l(R_k, ŷ)` for each `l` on the graph.
pub fn consistency_means<F: Scalar>(
    g: &mut Graph<F>,
    nets: &[Net<F>],
    omega: &[Vec<Var>],
    refined: Var,
    yhat: Var,
) -> Result<Vec<Var>> {
    let [n, k, h, w] = g.value(refined).dims4()?;
    let flat = g.reshape(refined, &[n * k, 1, h, w])?;
    let rep = g.repeat_batch(yhat, k)?;
    let mut means = Vec::with_capacity(nets.len());
    for (net, p) in nets.iter().zip(omega) {
        let o = net.forward_pair(g, p, flat, rep)?;
        let o = g.reshape(o, &[n, k, h, w])?;
        means.push(g.mean_channels(o)?);
    }
    Ok(means)
}

pub(crate) fn split_channels<F: Scalar>(t: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    let [n, l, h, w] = t.dims4()?;
    let plane = h * w;
    Ok((0..l)
        .map(|c| {
            let mut d = Vec::with_capacity(n * plane);
            for b in 0..n {
                d.extend_from_slice(&t.data()[(b * l + c) * plane..(b * l + c + 1) * plane]);
            }
            Tensor::new(vec![n, 1, h, w], d).expect("channel slice")
        })
        .collect())
}

/// One forward/backward pass of the joint objective.
///
/// `θ` receives the head gradient `g` started at the `R` node: rescaled with
/// `gamma`, or the plain `g1 + g2` when `gamma` is `None`. Each `ω_l`
/// receives the plain `∂L2/∂ω_l`.
#[allow(clippy::too_many_arguments)]
pub fn refiner_grads<F: Scalar>(
    refiner: &Net<F>,
    gnets: &[Net<F>],
    yhat: &Tensor<F>,
    target: &Tensor<F>,
    est: &Tensor<F>,
    lambda: f64,
    gamma: Option<f64>,
) -> Result<StepGrads<F>> {
    let mut g = Graph::new();
    let theta = refiner.bind(&mut g);
    let x = g.constant(yhat.clone());
    let d = g.constant(target.clone());
    let r = refiner.forward(&mut g, &theta, x)?;
    let l1 = loss_l1(&mut g, d, r)?;
    let l1v = g.value(l1).item().as_f64();
    let g1 = g.backward_to(l1, &[r])?.take(r).expect("gradient at R");

    let use_l2 = lambda > 0.0;
    let (mut l2v, mut l2_terms, mut omega_grads) = (0.0, Vec::new(), Vec::new());
    let mut g2 = Tensor::zeros(g1.shape());
    if use_l2 {
        let omega: Vec<Vec<Var>> = gnets.iter().map(|n| n.bind(&mut g)).collect();
        // ω leaves are created after R, so no injected gradient can reach them.
        for w in omega.iter().flatten() {
            debug_assert!(!g.depends_on(r, *w));
            if w.index() < r.index() {
                return Err(Error::config("consistency parameters precede R in the graph"));
            }
        }
        let means = consistency_means(&mut g, gnets, &omega, r, x)?;
        let est_maps: Vec<Var> = split_channels(est)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        if est_maps.len() != gnets.len() {
            return Err(Error::shape(format!(
                "{} estimator maps for {} consistency nets",
                est_maps.len(),
                gnets.len()
            )));
        }
        let (l2, terms) = loss_l2(&mut g, &means, &est_maps, lambda)?;
        l2v = g.value(l2).item().as_f64();
        l2_terms = terms.iter().map(|&t| g.value(t).item().as_f64()).collect();
        let mut grads = g.backward_to(l2, &[r])?;
        g2 = grads.take(r).unwrap_or_else(|| Tensor::zeros(g1.shape()));
        omega_grads = omega
            .iter()
            .zip(gnets)
            .map(|(vars, net)| {
                vars.iter()
                    .zip(&net.params)
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect()
            })
            .collect();
    }
    let gfinal = match gamma {
        _ if !use_l2 => g1.clone(),
        Some(gm) => rescale_gradient_batched(&g1, &g2, gm)?,
        None => g1.zip_map(&g2, |a, b| a + b)?,
    };
    let mut tg = g.backward_seeded(r, gfinal.clone())?;
    let theta_grads = theta
        .iter()
        .zip(&refiner.params)
        .map(|(&v, p)| tg.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(StepGrads {
        theta: theta_grads,
        omega: omega_grads,
        l1: l1v,
        l2: l2v,
        l2_terms,
        g1,
        g2,
        g: gfinal,
    })
}

/// Refiner, consistency nets and optimizer state owned by one trainer.
#[derive(Clone, Debug)]
pub struct RefinerState {
    pub refiner: Net<f32>,
    pub gnets: Vec<Net<f32>>,
    opt_theta: Adam<f32>,
    opt_omega: Vec<Adam<f32>>,
}

impl RefinerState {
    pub fn new(cfg: &RefinerConfig, moments: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let refiner = Net::init(cfg.arch(), derive_seed(seed, "refiner", 0), cfg.final_init)?;
        let gnets = (0..moments)
            .map(|l| Net::init(cfg.g_arch(), derive_seed(seed, "consistency", l as u64), FinalInit::Small))
            .collect::<Result<Vec<_>>>()?;
        Ok(RefinerState {
            opt_theta: Adam::new(&refiner.params, AdamConfig::default()),
            opt_omega: gnets.iter().map(|n| Adam::new(&n.params, AdamConfig::default())).collect(),
            refiner,
            gnets,
        })
    }

    fn apply(&mut self, grads: &StepGrads<f32>, lr: f64) -> Result<()> {
        self.opt_theta.step(&mut self.refiner.params, &grads.theta, lr)?;
        if !grads.omega.is_empty() {
            for ((net, opt), gw) in self.gnets.iter_mut().zip(&mut self.opt_omega).zip(&grads.omega) {
                opt.step(&mut net.params, gw, lr)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefinerOutcome {
    pub refiner: Net<f32>,
    pub gnets: Vec<Net<f32>>,
    pub history: Vec<LossBreakdown>,
}

/// Joint training of `θ` and `ω` against `D(ŷ)` and the frozen estimator.
#[allow(clippy::too_many_arguments)]
pub fn train_refiner(
    train: &[Image],
    targets: TargetSource<'_>,
    est: &TrainedEstimator,
    aux: &AuxConfig,
    cfg: &RefinerConfig,
    seed: u64,
    mut log: Option<&mut dyn std::io::Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<RefinerOutcome> {
    let moments = est.t.len();
    let mut state = RefinerState::new(cfg, moments, seed)?;
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let lr = cfg.lr.at(step, cfg.steps);
        let gamma = cfg.gamma.at(step, cfg.steps);
        let batch = sample_batch::<f32>(train, aux, Some(targets), cfg.crop, cfg.batch, seed, "refiner-batch", step)?;
        let target = batch.target.as_ref().expect("requested targets");
        let e = if cfg.lambda > 0.0 {
            est.predict(&batch.yhat)?
        } else {
            Tensor::zeros(&[cfg.batch, moments, cfg.crop, cfg.crop])
        };
        let grads = refiner_grads(
            &state.refiner,
            &state.gnets,
            &batch.yhat,
            target,
            &e,
            cfg.lambda,
            cfg.rescale.then_some(gamma),
        )?;
        check_finite(step, "L1", grads.l1)?;
        check_finite(step, "L2", grads.l2)?;
        state.apply(&grads, lr)?;
        let rec = LossBreakdown {
            step,
            lr,
            gamma,
            l1: grads.l1,
            l2: grads.l2,
            l2_terms: grads.l2_terms.clone(),
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            if let Some(w) = log.as_deref_mut() {
                let mut v = serde_json::to_value(&rec).expect("serializable");
                v["stage"] = "refiner".into();
                append_log(w, &v)?;
            }
            log::debug!("refiner step {step} l1 {:.3e} l2 {:.4} gamma {gamma:.3}", rec.l1, rec.l2);
        }
        history.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_refiner(dir, &state.refiner, &state.gnets)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_refiner(dir, &state.refiner, &state.gnets)?;
    }
    Ok(RefinerOutcome {
        refiner: state.refiner,
        gnets: state.gnets,
        history,
    })
}

pub const REFINER_FILE: &str = "refiner.srck";

pub fn consistency_file(l: usize) -> String {
    format!("consistency{}.srck", l + 1)
}

pub fn save_refiner(dir: &Path, refiner: &Net<f32>, gnets: &[Net<f32>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join(REFINER_FILE), &refiner.to_checkpoint())?;
    for (l, n) in gnets.iter().enumerate() {
        save_checkpoint(&dir.join(consistency_file(l)), &n.to_checkpoint())?;
    }
    Ok(())
}

/// Loads the refiner and its `moments` consistency nets.
pub fn load_refiner(dir: &Path, moments: usize) -> Result<(Net<f32>, Vec<Net<f32>>)> {
    let refiner = Net::from_checkpoint(&load_checkpoint(&dir.join(REFINER_FILE))?)?;
    if !matches!(refiner.arch, Arch::Refiner { .. }) {
        return Err(Error::config("checkpoint does not hold a refiner"));
    }
    let gnets = (0..moments)
        .map(|l| Net::from_checkpoint(&load_checkpoint(&dir.join(consistency_file(l)))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((refiner, gnets))
}

/// Mean over the K heads applied to the full image.
pub fn infer(refiner: &Net<f32>, y: &Image) -> Result<Image> {
    let out = refiner.eval(&image_tensor(y))?;
    let [_, k, h, w] = out.dims4()?;
    let plane = h * w;
    let mut mean = vec![0.0f64; plane];
    for c in 0..k {
        for (m, &v) in mean.iter_mut().zip(&out.data()[c * plane..(c + 1) * plane]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    Image::from_clamped(h, w, mean)
}

/// Like [`infer`] but on a fresh `ŷ` drawn from `(seed, index)`.
pub fn infer_on_aux(refiner: &Net<f32>, y: &Image, aux: &AuxConfig, seed: u64, index: u64) -> Result<Image> {
    let mut rng = stage_rng(seed, "infer-aux", index);
    let (yhat, _, _) = aux_values(y.data(), y.levels(), aux, &mut rng);
    infer(refiner, &Image::new(y.height(), y.width(), yhat, None)?)
}
