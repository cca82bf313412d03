use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub lr: f64,
    pub gamma: f64,
    pub l1: f64,
    pub l2: f64,
    /// `mean |ḡ_l − e_l|` for each moment order, before the `λ/L` factor.
    pub l2_terms: Vec<f64>,
}

/// Mean over batch, heads and pixels of `(R_k − D)²`.
///
/// `refined` is `[N,K,H,W]`, `target` is `[N,1,H,W]`.
pub fn loss_l1<F: Scalar>(g: &mut Graph<F>, target: Var, refined: Var) -> Result<Var> {
    let (t, r) = (g.value(target).shape(), g.value(refined).shape());
    if t.len() != 4 || r.len() != 4 || t[1] != 1 || t[0] != r[0] || t[2..] != r[2..] {
        return Err(Error::shape(format!("target {t:?} vs refined {r:?}")));
    }
    let d = g.sub(refined, target)?;
    let sq = g.pow_int(d, 2);
    Ok(g.mean(sq))
}

/// `(λ/L) Σ_l mean |ḡ_l − e_l|`; also returns the per-`l` mean nodes.
pub fn loss_l2<F: Scalar>(
    g: &mut Graph<F>,
    g_means: &[Var],
    est: &[Var],
    lambda: f64,
) -> Result<(Var, Vec<Var>)> {
    if g_means.len() != est.len() || g_means.is_empty() {
        return Err(Error::shape(format!(
            "{} consistency maps vs {} estimates",
            g_means.len(),
            est.len()
        )));
    }
    let mut terms = Vec::with_capacity(g_means.len());
    for (&a, &b) in g_means.iter().zip(est) {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
        let d = g.sub(a, b)?;
        let ab = g.abs(d);
        terms.push(g.mean(ab));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let scaled = g.scale(total, F::from_f64_lossy(lambda / terms.len() as f64));
    Ok((scaled, terms))
}

/// `L1` recomputed directly from values.
pub fn loss_l1_value<F: Scalar>(target: &Tensor<F>, refined: &Tensor<F>) -> Result<f64> {
    let [n, k, h, w] = dims(refined)?;
    if target.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!("{:?} vs {:?}", target.shape(), refined.shape())));
    }
    let plane = h * w;
    let mut s = 0.0;
    for b in 0..n {
        for c in 0..k {
            for i in 0..plane {
                let d = refined.data()[(b * k + c) * plane + i].as_f64() - target.data()[b * plane + i].as_f64();
                s += d * d;
            }
        }
    }
    Ok(s / (n * k * plane) as f64)
}

/// `L2` recomputed directly from values.
pub fn loss_l2_value<F: Scalar>(g_means: &[Tensor<F>], est: &[Tensor<F>], lambda: f64) -> Result<f64> {
    if g_means.len() != est.len() || g_means.is_empty() {
        return Err(Error::shape("mismatched map counts"));
    }
    let mut s = 0.0;
    for (a, b) in g_means.iter().zip(est) {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let m: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .sum::<f64>()
            / a.len() as f64;
        s += m;
    }
    Ok(lambda * s / g_means.len() as f64)
}

fn dims<F: Scalar>(t: &Tensor<F>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, k, h, w] => Ok([n, k, h, w]),
        _ => Err(Error::shape(format!("expected [N,K,H,W], got {:?}", t.shape()))),
    }
}

fn sgn<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// `s(a) = (‖g1‖ / ‖a‖) a`, zero when `a` is zero.
pub fn match_norm<F: Scalar>(a: &[F], g1_norm: F) -> Vec<F> {
    let na = norm(a);
    if na == F::zero() {
        return vec![F::zero(); a.len()];
    }
    let c = g1_norm / na;
    a.iter().map(|&x| x * c).collect()
}

fn rescale_slice<F: Scalar>(g1: &[F], g2: &[F], gamma: F, out: &mut [F]) {
    let n1 = norm(g1);
    let a = match_norm(g2, n1);
    let sg: Vec<F> = g2.iter().map(|&x| sgn(x)).collect();
    let b = match_norm(&sg, n1);
    let half = F::from_f64_lossy(0.5);
    let denom = F::one() + gamma;
    for i in 0..g1.len() {
        out[i] = (g1[i] + gamma * (a[i] + b[i]) * half) / denom;
    }
}

/// `g = (g1 + γ (s(g2) + s(sgn g2)) / 2) / (1 + γ)` over the whole tensor.
pub fn rescale_gradient<F: Scalar>(g1: &Tensor<F>, g2: &Tensor<F>, gamma: f64) -> Result<Tensor<F>> {
    check_rescale(g1, g2, gamma)?;
    if gamma == 0.0 {
        return Ok(g1.clone());
    }
    let mut out = Tensor::zeros(g1.shape());
    rescale_slice(g1.data(), g2.data(), F::from_f64_lossy(gamma), out.data_mut());
    Ok(out)
}

/// Batched form used by the trainer on `[N,K,H,W]` head gradients: for each
/// sample, `g2` is summed over the heads and broadcast back, and the
/// rescaling is applied with that sample's norms.
pub fn rescale_gradient_batched<F: Scalar>(
    g1: &Tensor<F>,
    g2: &Tensor<F>,
    gamma: f64,
) -> Result<Tensor<F>> {
    check_rescale(g1, g2, gamma)?;
    if gamma == 0.0 {
        return Ok(g1.clone());
    }
    let [n, k, h, w] = dims(g1)?;
    let plane = h * w;
    let item = k * plane;
    let gm = F::from_f64_lossy(gamma);
    let mut out = Tensor::zeros(g1.shape());
    let mut summed = vec![F::zero(); item];
    for b in 0..n {
        let src = &g2.data()[b * item..(b + 1) * item];
        let mut acc = vec![F::zero(); plane];
        for c in 0..k {
            for (a, &x) in acc.iter_mut().zip(&src[c * plane..(c + 1) * plane]) {
                *a = *a + x;
            }
        }
        for c in 0..k {
            summed[c * plane..(c + 1) * plane].copy_from_slice(&acc);
        }
        rescale_slice(
            &g1.data()[b * item..(b + 1) * item],
            &summed,
            gm,
            &mut out.data_mut()[b * item..(b + 1) * item],
        );
    }
    Ok(out)
}

fn check_rescale<F: Scalar>(g1: &Tensor<F>, g2: &Tensor<F>, gamma: f64) -> Result<()> {
    if g1.shape() != g2.shape() {
        return Err(Error::shape(format!("g1 {:?} vs g2 {:?}", g1.shape(), g2.shape())));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gamma {gamma} must be non-negative")));
    }
    Ok(())
}
