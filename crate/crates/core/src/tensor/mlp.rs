//! Fused per-pixel network used by consistency nets.
//!
//! For every pixel with inputs `(x, y)`:
//! `h₀ = relu(W₀ [x, y] + b₀)`, `hᵢ = hᵢ₋₁ + relu(Wᵢ hᵢ₋₁ + bᵢ)` for
//! `i = 1..=res`, and `out = w [h_res, y − x] + b`.
//!
//! Pixels are processed in tiles so the activations stay in cache; the
//! backward pass recomputes them tile by tile.

use super::Scalar;
use crate::parallel;

const TILE: usize = 256;

/// `c = a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    beta: F,
    c: &mut [F],
) {
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.len() > last(rsa, csa, m, k) && b.len() > last(rsb, csb, k, n) && c.len() >= m * n);
    // SAFETY: the asserts cover every index gemm reads or writes, and `c`
    // is a distinct mutable slice.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Parameter views in network order: `W₀ [w,2]`, `b₀ [w]`, then `Wᵢ [w,w]`,
/// `bᵢ [w]` per residual layer, then `w [w+1]`, `b [1]`.
pub(crate) struct MlpParams<'a, F> {
    pub width: usize,
    pub tensors: Vec<&'a [F]>,
}

impl<F: Scalar> MlpParams<'_, F> {
    fn res(&self) -> usize {
        (self.tensors.len() - 4) / 2
    }
}

/// Activations of one tile: pre-activations and hidden states per layer,
/// each `[width, t]`.
struct Tape<F> {
    pre: Vec<Vec<F>>,
    hidden: Vec<Vec<F>>,
}

fn tile_forward<F: Scalar>(p: &MlpParams<'_, F>, x: &[F], y: &[F], out: &mut [F], keep: bool) -> Option<Tape<F>> {
    let (w, t) = (p.width, x.len());
    let mut inp = Vec::with_capacity(2 * t);
    inp.extend_from_slice(x);
    inp.extend_from_slice(y);
    let mut pre = vec![F::zero(); w * t];
    gemm(w, 2, t, p.tensors[0], (2, 1), &inp, (t, 1), F::zero(), &mut pre);
    add_rows(&mut pre, p.tensors[1], t);
    let mut h: Vec<F> = pre.iter().map(|&v| v.max(F::zero())).collect();
    let mut tape = keep.then(|| Tape {
        pre: Vec::with_capacity(p.res() + 1),
        hidden: Vec::with_capacity(p.res() + 1),
    });
    for i in 0..p.res() {
        let mut a = vec![F::zero(); w * t];
        gemm(w, w, t, p.tensors[2 + 2 * i], (w, 1), &h, (t, 1), F::zero(), &mut a);
        add_rows(&mut a, p.tensors[3 + 2 * i], t);
        let mut next = h.clone();
        for (n, &v) in next.iter_mut().zip(&a) {
            *n = *n + v.max(F::zero());
        }
        if let Some(tp) = tape.as_mut() {
            tp.pre.push(std::mem::replace(&mut pre, a));
            tp.hidden.push(std::mem::replace(&mut h, next));
        } else {
            h = next;
        }
    }
    let n = p.tensors.len();
    let (wo, bo) = (p.tensors[n - 2], p.tensors[n - 1][0]);
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = bo + wo[w] * (y[j] - x[j]);
        for c in 0..w {
            s = s + wo[c] * h[c * t + j];
        }
        *o = s;
    }
    tape.map(|mut tp| {
        tp.pre.push(pre);
        tp.hidden.push(h);
        tp
    })
}

fn add_rows<F: Scalar>(m: &mut [F], b: &[F], t: usize) {
    for (row, &bv) in m.chunks_mut(t).zip(b) {
        row.iter_mut().for_each(|v| *v = *v + bv);
    }
}

pub(crate) fn forward<F: Scalar>(p: &MlpParams<'_, F>, x: &[F], y: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    parallel::for_each_chunk_mut(&mut out, TILE, |i, dst| {
        let r = i * TILE..i * TILE + dst.len();
        tile_forward(p, &x[r.clone()], &y[r], dst, false);
    });
    out
}

pub(crate) struct MlpGrads<F> {
    pub dx: Vec<F>,
    pub dy: Vec<F>,
    pub params: Vec<Vec<F>>,
}

/// Gradients of `Σ grad·out` with respect to inputs and parameters.
pub(crate) fn backward<F: Scalar>(p: &MlpParams<'_, F>, x: &[F], y: &[F], grad: &[F]) -> MlpGrads<F> {
    let tiles = x.len().div_ceil(TILE);
    let parts = parallel::map_indices(tiles, |i| {
        let r = i * TILE..((i + 1) * TILE).min(x.len());
        tile_backward(p, &x[r.clone()], &y[r.clone()], &grad[r])
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dy = Vec::with_capacity(x.len());
    let mut params: Vec<Vec<F>> = p.tensors.iter().map(|t| vec![F::zero(); t.len()]).collect();
    for (tx, ty, tp) in parts {
        dx.extend(tx);
        dy.extend(ty);
        for (acc, d) in params.iter_mut().zip(tp) {
            acc.iter_mut().zip(d).for_each(|(a, v)| *a = *a + v);
        }
    }
    MlpGrads { dx, dy, params }
}

#[allow(clippy::type_complexity)]
fn tile_backward<F: Scalar>(p: &MlpParams<'_, F>, x: &[F], y: &[F], g: &[F]) -> (Vec<F>, Vec<F>, Vec<Vec<F>>) {
    let (w, t) = (p.width, x.len());
    let mut out = vec![F::zero(); t];
    let tape = tile_forward(p, x, y, &mut out, true).expect("tape requested");
    let n = p.tensors.len();
    let res = p.res();
    let mut dp: Vec<Vec<F>> = p.tensors.iter().map(|t| vec![F::zero(); t.len()]).collect();
    let wo = p.tensors[n - 2];
    let h_last = &tape.hidden[res];
    // output layer
    let mut dh = vec![F::zero(); w * t];
    let (mut dx, mut dy) = (vec![F::zero(); t], vec![F::zero(); t]);
    for j in 0..t {
        let gj = g[j];
        dp[n - 1][0] = dp[n - 1][0] + gj;
        dp[n - 2][w] = dp[n - 2][w] + gj * (y[j] - x[j]);
        let dd = gj * wo[w];
        dy[j] = dd;
        dx[j] = -dd;
    }
    for c in 0..w {
        let hrow = &h_last[c * t..(c + 1) * t];
        let dhrow = &mut dh[c * t..(c + 1) * t];
        let mut acc = F::zero();
        for j in 0..t {
            acc = acc + g[j] * hrow[j];
            dhrow[j] = wo[c] * g[j];
        }
        dp[n - 2][c] = acc;
    }
    // residual layers, last to first
    let mut m = vec![F::zero(); w * t];
    for i in (0..res).rev() {
        let a = &tape.pre[i + 1];
        for ((mv, &d), &av) in m.iter_mut().zip(&dh).zip(a) {
            *mv = if av > F::zero() { d } else { F::zero() };
        }
        let h_prev = &tape.hidden[i];
        // dWᵢ = m · h_prevᵀ
        gemm(w, t, w, &m, (t, 1), h_prev, (1, t), F::zero(), &mut dp[2 + 2 * i]);
        for (c, row) in m.chunks(t).enumerate() {
            dp[3 + 2 * i][c] = row.iter().fold(F::zero(), |s, &v| s + v);
        }
        // dh += Wᵢᵀ · m
        gemm(w, w, t, p.tensors[2 + 2 * i], (1, w), &m, (t, 1), F::one(), &mut dh);
    }
    // input layer
    for ((mv, &d), &av) in m.iter_mut().zip(&dh).zip(&tape.pre[0]) {
        *mv = if av > F::zero() { d } else { F::zero() };
    }
    let w0 = p.tensors[0];
    for c in 0..w {
        let row = &m[c * t..(c + 1) * t];
        let (mut sx, mut sy, mut sb) = (F::zero(), F::zero(), F::zero());
        for j in 0..t {
            sx = sx + row[j] * x[j];
            sy = sy + row[j] * y[j];
            sb = sb + row[j];
            dx[j] = dx[j] + w0[2 * c] * row[j];
            dy[j] = dy[j] + w0[2 * c + 1] * row[j];
        }
        dp[0][2 * c] = sx;
        dp[0][2 * c + 1] = sy;
        dp[1][c] = sb;
    }
    (dx, dy, dp)
}
