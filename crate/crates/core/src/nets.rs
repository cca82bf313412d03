//! The three networks: the K-head refiner, the per-pixel consistency nets and
//! the conditional-expectation estimator.
//!
//! A network is an [`Arch`] plus a flat list of parameter tensors. Forward
//! passes are written against a [`Graph`], with the parameters bound either as
//! trainable leaves or as constants.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::tensor::{Checkpoint, Graph, Padding, Scalar, Tensor, Var};

/// Number of 1×1 layers in a consistency net.
pub const CONSISTENCY_LAYERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "net", rename_all = "lowercase")]
pub enum Arch {
    /// `heads` outputs, each `input − residual_k`.
    Refiner {
        depth: usize,
        width: usize,
        heads: usize,
    },
    /// Non-residual backbone with `outputs` channels.
    Estimator {
        depth: usize,
        width: usize,
        outputs: usize,
    },
    /// Per-pixel map of `(x̂, ŷ)`.
    Consistency { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalInit {
    /// Same fan-in scaled draw as the other layers, times 1e-2.
    Small,
    Zero,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Arch::Refiner {
                depth,
                width,
                heads,
            } => depth >= 2 && width >= 1 && heads >= 1,
            Arch::Estimator {
                depth,
                width,
                outputs,
            } => depth >= 2 && width >= 1 && outputs >= 1,
            Arch::Consistency { width } => width >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid architecture {self:?}")))
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match *self {
            Arch::Refiner {
                depth,
                width,
                heads,
            } => backbone_shapes(depth, width, heads),
            Arch::Estimator {
                depth,
                width,
                outputs,
            } => backbone_shapes(depth, width, outputs),
            Arch::Consistency { width } => {
                let mut v = vec![
                    ("in.w".to_string(), vec![width, 2, 1, 1]),
                    ("in.b".to_string(), vec![1, width, 1, 1]),
                ];
                for i in 0..CONSISTENCY_LAYERS - 2 {
                    v.push((format!("res{i}.w"), vec![width, width, 1, 1]));
                    v.push((format!("res{i}.b"), vec![1, width, 1, 1]));
                }
                v.push(("out.w".to_string(), vec![1, width + 1, 1, 1]));
                v.push(("out.b".to_string(), vec![1, 1, 1, 1]));
                v
            }
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            Arch::Refiner {
                depth,
                width,
                heads: out,
            }
            | Arch::Estimator {
                depth,
                width,
                outputs: out,
            } => {
                let first = 9 * width + width;
                let middle = (depth - 2) * (9 * width * width + 2 * width);
                let last = 9 * width * out + out;
                first + middle + last
            }
            Arch::Consistency { width } => {
                3 * width + (CONSISTENCY_LAYERS - 2) * (width * width + width) + width + 2
            }
        }
    }

    pub fn to_header(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_header(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::parse("architecture header", e.to_string()))
    }
}

fn backbone_shapes(depth: usize, width: usize, out: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![
        ("l0.w".to_string(), vec![width, 1, 3, 3]),
        ("l0.b".to_string(), vec![1, width, 1, 1]),
    ];
    for i in 1..depth - 1 {
        v.push((format!("l{i}.w"), vec![width, width, 3, 3]));
        v.push((format!("l{i}.s"), vec![1, width, 1, 1]));
        v.push((format!("l{i}.b"), vec![1, width, 1, 1]));
    }
    let i = depth - 1;
    v.push((format!("l{i}.w"), vec![out, width, 3, 3]));
    v.push((format!("l{i}.b"), vec![1, out, 1, 1]));
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<F> {
    pub arch: Arch,
    pub params: Vec<Tensor<F>>,
}

impl<F: Scalar> Net<F> {
    /// Fan-in scaled normal weights (std `√(2/fan_in)`), unit scales, zero biases.
    pub fn init(arch: Arch, seed: u64, final_init: FinalInit) -> Result<Self> {
        arch.validate()?;
        let stage = match arch {
            Arch::Refiner { .. } => "init-refiner",
            Arch::Estimator { .. } => "init-estimator",
            Arch::Consistency { .. } => "init-consistency",
        };
        let mut rng = stage_rng(seed, stage, 0);
        let shapes = arch.param_shapes();
        let last_w = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                if name.ends_with(".s") {
                    Tensor::full(shape, F::one())
                } else if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut std = (2.0 / fan_in as f64).sqrt();
                    if i == last_w && !matches!(arch, Arch::Consistency { .. }) {
                        match final_init {
                            FinalInit::Small => std *= 1e-2,
                            FinalInit::Zero => std = 0.0,
                        }
                    }
                    normal_tensor(shape, std, &mut rng)
                }
            })
            .collect();
        Ok(Net { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers the parameters as constants (frozen network).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Refiner or estimator forward on `[N,1,H,W]`.
    pub fn forward(&self, g: &mut Graph<F>, p: &[Var], input: Var) -> Result<Var> {
        match self.arch {
            Arch::Refiner { depth, .. } => {
                let res = backbone(g, p, input, depth)?;
                g.sub(input, res)
            }
            Arch::Estimator { depth, .. } => backbone(g, p, input, depth),
            Arch::Consistency { .. } => Err(Error::config(
                "consistency nets take two inputs; use forward_pair",
            )),
        }
    }

    /// Consistency-net forward on `x̂, ŷ` of shape `[N,1,H,W]`, as one fused
    /// per-pixel node.
    pub fn forward_pair(&self, g: &mut Graph<F>, p: &[Var], xhat: Var, yhat: Var) -> Result<Var> {
        self.check_pair(g, xhat, yhat)?;
        g.pixel_mlp(xhat, yhat, p)
    }

    fn check_pair(&self, g: &Graph<F>, xhat: Var, yhat: Var) -> Result<()> {
        if !matches!(self.arch, Arch::Consistency { .. }) {
            return Err(Error::config("forward_pair needs a consistency net"));
        }
        if g.value(xhat).shape() != g.value(yhat).shape() {
            return Err(Error::shape(format!(
                "x̂ {:?} vs ŷ {:?}",
                g.value(xhat).shape(),
                g.value(yhat).shape()
            )));
        }
        Ok(())
    }

    /// The same map as [`Net::forward_pair`] built from generic conv,
    /// concat and activation nodes.
    pub fn forward_pair_layers(&self, g: &mut Graph<F>, p: &[Var], xhat: Var, yhat: Var) -> Result<Var> {
        self.check_pair(g, xhat, yhat)?;
        let input = g.concat_channels(&[xhat, yhat])?;
        let c = g.conv2d(input, p[0], Padding::Valid)?;
        let c = g.add(c, p[1])?;
        let mut h = g.relu(c);
        for i in 0..CONSISTENCY_LAYERS - 2 {
            let c = g.conv2d(h, p[2 + 2 * i], Padding::Valid)?;
            let c = g.add(c, p[3 + 2 * i])?;
            let r = g.relu(c);
            h = g.add(h, r)?;
        }
        let diff = g.sub(yhat, xhat)?;
        let cat = g.concat_channels(&[h, diff])?;
        let n = p.len();
        let o = g.conv2d(cat, p[n - 2], Padding::Valid)?;
        g.add(o, p[n - 1])
    }

    /// Graph-free evaluation of `forward`, returning the output tensor.
    pub fn eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn eval_pair(&self, xhat: &Tensor<F>, yhat: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(xhat.clone());
        let y = g.constant(yhat.clone());
        let o = self.forward_pair(&mut g, &p, x, y)?;
        Ok(g.value(o).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            arch: self.arch.to_header(),
            tensors: self
                .arch
                .param_shapes()
                .into_iter()
                .zip(&self.params)
                .map(|((name, _), t)| (name, t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self> {
        let arch = Arch::from_header(&ckpt.arch)?;
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {name}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "{name}: checkpoint {:?}, architecture {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Net { arch, params })
    }

    pub fn cast<G: Scalar>(&self) -> Net<G> {
        Net {
            arch: self.arch,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

/// conv+bias+relu, then (conv+scale+bias+relu)×(depth−2), then conv+bias.
fn backbone<F: Scalar>(g: &mut Graph<F>, p: &[Var], input: Var, depth: usize) -> Result<Var> {
    let c = g.conv2d(input, p[0], Padding::Same)?;
    let c = g.add(c, p[1])?;
    let mut h = g.relu(c);
    for i in 0..depth - 2 {
        let base = 2 + 3 * i;
        let c = g.conv2d(h, p[base], Padding::Same)?;
        let c = g.mul(c, p[base + 1])?;
        let c = g.add(c, p[base + 2])?;
        h = g.relu(c);
    }
    let n = p.len();
    let o = g.conv2d(h, p[n - 2], Padding::Same)?;
    g.add(o, p[n - 1])
}

fn normal_tensor<F: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| F::from_f64_lossy(d.sample(rng)))
}

/// Parameter count of every network against its closed form.
pub fn audit_param_counts<F: Scalar>(nets: &[&Net<F>]) -> Result<()> {
    for n in nets {
        let got = n.param_count();
        let want = n.arch.param_count();
        if got != want {
            return Err(Error::config(format!(
                "{:?} has {got} parameters, formula gives {want}",
                n.arch
            )));
        }
    }
    Ok(())
}
