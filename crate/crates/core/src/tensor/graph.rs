//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and the tape is acyclic by construction. A node may carry
//! an injected gradient: during backward, the gradient arriving at that node
//! is replaced by the injected tensor before being propagated to its parents.

use super::kernels::{self, ConvGeom};
use super::mlp::{self, MlpParams};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial size (odd square kernels).
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Abs(Var),
    PowInt(Var, i32),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConcatChannels(Vec<Var>),
    MeanChannels(Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    RepeatBatch(Var, usize),
    PixelMlp {
        x: Var,
        y: Var,
        params: Vec<Var>,
        width: usize,
    },
}

impl<F> Op<F> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ConcatChannels(v) => v.clone(),
            Op::PixelMlp { x, y, params, .. } => [*x, *y].into_iter().chain(params.iter().copied()).collect(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::PowInt(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::MeanChannels(a)
            | Op::SliceChannels { input: a, .. }
            | Op::RepeatBatch(a, _) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    injected: Option<Tensor<F>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            injected: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn pow_int(&mut self, a: Var, p: i32) -> Var {
        let v = self.value(a).map(|x| x.powi(p));
        self.push(v, Op::PowInt(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Cross-correlation of `[N,C_in,H,W]` (or `[C_in,H,W]`) with `[C_out,C_in,kH,kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input),
            self.value(kernel),
            padding == Padding::Same,
        )?;
        let v = kernels::conv2d_forward(&geom, self.value(input), self.value(kernel));
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        ))
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::config("empty concat"))?);
        let [n, _, h, w] = four(first)?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = four(self.value(p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat of {:?} with {:?}",
                    first.shape(),
                    self.value(p).shape()
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let v = Tensor::new(vec![n, total, h, w], data)?;
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec())))
    }

    /// `[N,C,H,W]` → `[N,1,H,W]`, averaging over channels.
    pub fn mean_channels(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = four(self.value(a))?;
        let plane = h * w;
        let src = self.value(a).data();
        let inv = F::one() / F::from_usize(c).unwrap_or_else(F::one);
        let mut data = vec![F::zero(); n * plane];
        for b in 0..n {
            let dst = &mut data[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (d, &x) in dst.iter_mut().zip(s) {
                    *d = *d + x;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let v = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.push(v, Op::MeanChannels(a)))
    }

    /// Channels `start..start+len` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = four(self.value(a))?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let v = Tensor::new(vec![n, len, h, w], data)?;
        Ok(self.push(v, Op::SliceChannels { input: a, start }))
    }

    /// Repeats each batch item `times` times consecutively along axis 0.
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let Some((&n, rest)) = t.shape().split_first() else {
            return Err(Error::shape("repeat_batch of a scalar"));
        };
        let item: usize = rest.iter().product();
        let mut data = Vec::with_capacity(t.len() * times);
        for b in 0..n {
            for _ in 0..times {
                data.extend_from_slice(&t.data()[b * item..(b + 1) * item]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n * times;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::RepeatBatch(a, times)))
    }

    /// Per-pixel network on two same-shape inputs; see the `mlp` kernel for
    /// the layer layout. `params` are `W₀, b₀, (Wᵢ, bᵢ)…, w, b` with any
    /// shapes holding `[w,2]`, `[w]`, `[w,w]`, `[w]`, `[w+1]`, `[1]` values.
    pub fn pixel_mlp(&mut self, x: Var, y: Var, params: &[Var]) -> Result<Var> {
        if self.value(x).shape() != self.value(y).shape() {
            return Err(Error::shape(format!(
                "pixel_mlp inputs {:?} vs {:?}",
                self.value(x).shape(),
                self.value(y).shape()
            )));
        }
        if params.len() < 4 || params.len() % 2 != 0 {
            return Err(Error::config(format!("pixel_mlp needs an even number (>= 4) of parameters, got {}", params.len())));
        }
        let width = self.value(params[1]).len();
        let n = params.len();
        let ok = self.value(params[0]).len() == 2 * width
            && (1..(n - 2) / 2).all(|i| {
                self.value(params[2 * i]).len() == width * width && self.value(params[2 * i + 1]).len() == width
            })
            && self.value(params[n - 2]).len() == width + 1
            && self.value(params[n - 1]).len() == 1;
        if width == 0 || !ok {
            return Err(Error::shape("pixel_mlp parameter sizes do not match one width"));
        }
        let out = mlp::forward(&self.mlp_params(params, width), self.value(x).data(), self.value(y).data());
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::PixelMlp {
                x,
                y,
                params: params.to_vec(),
                width,
            },
        ))
    }

    fn mlp_params(&self, params: &[Var], width: usize) -> MlpParams<'_, F> {
        MlpParams {
            width,
            tensors: params.iter().map(|v| self.value(*v).data()).collect(),
        }
    }

    /// Overrides the gradient flowing out of `v` during subsequent backward passes.
    pub fn inject(&mut self, v: Var, grad: Tensor<F>) -> Result<()> {
        if grad.shape() != self.value(v).shape() {
            return Err(Error::shape(format!(
                "injected gradient {:?} for node of shape {:?}",
                grad.shape(),
                self.value(v).shape()
            )));
        }
        self.nodes[v.0].injected = Some(grad);
        Ok(())
    }

    pub fn clear_injection(&mut self, v: Var) {
        self.nodes[v.0].injected = None;
    }

    /// True when `ancestor` is reachable from `node` through parent links.
    pub fn depends_on(&self, node: Var, ancestor: Var) -> bool {
        if ancestor.0 > node.0 {
            return false;
        }
        let mut seen = vec![false; node.0 + 1];
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if v == ancestor {
                return true;
            }
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            stack.extend(self.nodes[v.0].op.parents());
        }
        false
    }

    /// Gradients of a scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.backward_to(loss, &[])
    }

    /// Like [`backward`](Self::backward) but gradients stop at the `stops`
    /// nodes: they are recorded there and not propagated further down.
    pub fn backward_to(&self, loss: Var, stops: &[Var]) -> Result<Gradients<F>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let seed = Tensor::full(value.shape(), F::one());
        self.propagate(loss, seed, stops)
    }

    /// Starts the backward sweep at `start` with an explicit upstream gradient.
    pub fn backward_seeded(&self, start: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.value(start).shape() {
            return Err(Error::shape(format!(
                "seed {:?} for node {:?}",
                seed.shape(),
                self.value(start).shape()
            )));
        }
        self.propagate(start, seed, &[])
    }

    fn propagate(&self, start: Var, seed: Tensor<F>, stops: &[Var]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(start.0 + 1, || None);
        grads[start.0] = Some(seed);
        for i in (0..=start.0).rev() {
            let node = &self.nodes[i];
            if grads[i].is_none() || !node.requires_grad {
                continue;
            }
            if let Some(inj) = &node.injected {
                grads[i] = Some(inj.clone());
            }
            if stops.iter().any(|s| s.0 == i) {
                continue;
            }
            let parents = node.op.parents();
            if parents.iter().any(|p| p.0 >= i) {
                return Err(Error::Cycle(i));
            }
            if parents.is_empty() {
                continue;
            }
            let g = grads[i].as_ref().expect("checked above");
            for (p, pg) in self.local_backward(node, g) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Parent gradients of one node given its output gradient `g`.
    fn local_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let bin = |a: Var, b: Var, ga: Tensor<F>, gb: Tensor<F>| {
            let mut out = Vec::with_capacity(2);
            if need(a) {
                out.push((a, kernels::reduce_to(&ga, val(a).shape())));
            }
            if need(b) {
                out.push((b, kernels::reduce_to(&gb, val(b).shape())));
            }
            out
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => bin(*a, *b, g.clone(), g.clone()),
            Op::Sub(a, b) => bin(*a, *b, g.clone(), g.map(|x| -x)),
            Op::Mul(a, b) => {
                let ga = if need(*a) {
                    kernels::broadcast_binary(g, val(*b), |x, y| x * y).expect("forward shapes")
                } else {
                    g.clone()
                };
                let gb = if need(*b) {
                    kernels::broadcast_binary(g, val(*a), |x, y| x * y).expect("forward shapes")
                } else {
                    g.clone()
                };
                bin(*a, *b, ga, gb)
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gy, x| if x > F::zero() { gy } else { F::zero() })
                    .expect("same shape"),
            )],
            Op::Abs(a) => vec![(
                *a,
                g.zip_map(val(*a), |gy, x| {
                    if x > F::zero() {
                        gy
                    } else if x < F::zero() {
                        -gy
                    } else {
                        F::zero()
                    }
                })
                .expect("same shape"),
            )],
            Op::PowInt(a, p) => {
                let pf = F::from_i32(*p).expect("small integer");
                vec![(
                    *a,
                    g.zip_map(val(*a), |gy, x| gy * pf * x.powi(p - 1))
                        .expect("same shape"),
                )]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = F::from_usize(val(*a).len()).unwrap_or_else(F::one);
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Reshape(a) => vec![(
                *a,
                g.clone().reshape(val(*a).shape()).expect("same size"),
            )],
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dk) =
                    kernels::conv2d_backward(geom, val(*input), val(*kernel), g, need(*input));
                let mut out = Vec::with_capacity(2);
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*kernel, dk));
                out
            }
            Op::ConcatChannels(parts) => {
                let [n, total, h, w] = four(g).expect("4-D");
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).shape()[1];
                    if need(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let base = (b * total + offset) * plane;
                            d.extend_from_slice(&g.data()[base..base + c * plane]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), d).expect("size")));
                    }
                    offset += c;
                }
                out
            }
            Op::MeanChannels(a) => {
                let [n, c, h, w] = four(val(*a)).expect("4-D");
                let plane = h * w;
                let inv = F::one() / F::from_usize(c).unwrap_or_else(F::one);
                let mut d = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let src = &g.data()[b * plane..(b + 1) * plane];
                    for _ in 0..c {
                        d.extend(src.iter().map(|&x| x * inv));
                    }
                }
                vec![(*a, Tensor::new(val(*a).shape().to_vec(), d).expect("size"))]
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = four(val(*input)).expect("4-D");
                let len = g.shape()[1];
                let plane = h * w;
                let mut d = vec![F::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    d[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![(*input, Tensor::new(val(*input).shape().to_vec(), d).expect("size"))]
            }
            Op::PixelMlp { x, y, params, width } => {
                let gr = mlp::backward(&self.mlp_params(params, *width), val(*x).data(), val(*y).data(), g.data());
                let mut out = Vec::with_capacity(params.len() + 2);
                let shape = val(*x).shape().to_vec();
                if need(*x) {
                    out.push((*x, Tensor::new(shape.clone(), gr.dx).expect("size")));
                }
                if need(*y) {
                    out.push((*y, Tensor::new(shape, gr.dy).expect("size")));
                }
                for (&p, d) in params.iter().zip(gr.params) {
                    if need(p) {
                        out.push((p, Tensor::new(val(p).shape().to_vec(), d).expect("size")));
                    }
                }
                out
            }
            Op::RepeatBatch(a, times) => {
                let src = val(*a);
                let item = src.len() / src.shape()[0];
                let mut d = vec![F::zero(); src.len()];
                for (b, chunk) in d.chunks_mut(item).enumerate() {
                    for r in 0..*times {
                        let off = (b * times + r) * item;
                        for (x, &y) in chunk.iter_mut().zip(&g.data()[off..off + item]) {
                            *x = *x + y;
                        }
                    }
                }
                vec![(*a, Tensor::new(src.shape().to_vec(), d).expect("size"))]
            }
        }
    }
}

fn four<F: Scalar>(t: &Tensor<F>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(format!("expected [N,C,H,W], got {s:?}"))),
    }
}
