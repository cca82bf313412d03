//! Numeric kernels behind the graph ops: im2col convolution and broadcasting.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<F: Scalar>(input: &Tensor<F>, kernel: &Tensor<F>, same: bool) -> Result<Self> {
        let [n, c_in, h, w] = input.dims4()?;
        let [c_out, kc, kh, kw] = match *kernel.shape() {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::config(format!("kernel must be 4-D, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::config(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if same && (kh % 2 == 0 || kw % 2 == 0 || kh != kw) {
            return Err(Error::config(format!(
                "same padding needs a square odd kernel, got {kh}x{kw}"
            )));
        }
        let pad = if same { kh / 2 } else { 0 };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<F: Scalar>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let x_lo = g.pad.saturating_sub(kx);
                let x_hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        d.fill(F::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..x_lo].fill(F::zero());
                    let ix0 = x_lo + kx - g.pad;
                    d[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    d[x_hi..].fill(F::zero());
                }
                row += 1;
            }
        }
    }
}

fn col2im<F: Scalar>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                let x_lo = g.pad.saturating_sub(kx);
                let x_hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s = &src[oy * g.wo + x_lo..oy * g.wo + x_hi];
                    let ix0 = x_lo + kx - g.pad;
                    let d = &mut chan[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + s.len()];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c = a · b` for contiguous operands (`a`: m×k, `b`: k×n).
fn matmul<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the bounds above cover every index gemm touches.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            F::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(
    g: &ConvGeom,
    input: &Tensor<F>,
    kernel: &Tensor<F>,
) -> Tensor<F> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.out_plane();
    let mut out = vec![F::zero(); g.n * out_sz];
    let x = input.data();
    let k = kernel.data();
    parallel::for_each_chunk_mut(&mut out, out_sz, |i, dst| {
        let img = &x[i * in_sz..(i + 1) * in_sz];
        if g.pointwise() {
            matmul(g.c_out, g.c_in, g.out_plane(), k, img, dst);
        } else {
            let mut cols = vec![F::zero(); g.patch() * g.out_plane()];
            im2col(g, img, &mut cols);
            matmul(g.c_out, g.patch(), g.out_plane(), k, &cols, dst);
        }
    });
    let shape = if input.shape().len() == 3 {
        vec![g.c_out, g.ho, g.wo]
    } else {
        vec![g.n, g.c_out, g.ho, g.wo]
    };
    Tensor::new(shape, out).expect("conv output size")
}

/// Returns `(d input, d kernel)`; the input gradient is skipped when not needed.
pub(crate) fn conv2d_backward<F: Scalar>(
    g: &ConvGeom,
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    grad_out: &Tensor<F>,
    need_input: bool,
) -> (Option<Tensor<F>>, Tensor<F>) {
    let in_sz = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_sz = g.c_out * plane;
    let patch = g.patch();
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    let per_image = parallel::map_indices(g.n, |i| {
        let img = &x[i * in_sz..(i + 1) * in_sz];
        let gout = &go[i * out_sz..(i + 1) * out_sz];
        let owned_cols;
        let cols: &[F] = if g.pointwise() {
            img
        } else {
            let mut c = vec![F::zero(); patch * plane];
            im2col(g, img, &mut c);
            owned_cols = c;
            &owned_cols
        };
        let mut dk = vec![F::zero(); g.c_out * patch];
        // SAFETY: dk is c_out×patch, gout is c_out×plane, cols is patch×plane
        // read transposed through its strides.
        unsafe {
            F::gemm(
                g.c_out,
                plane,
                patch,
                F::one(),
                gout.as_ptr(),
                plane as isize,
                1,
                cols.as_ptr(),
                1,
                plane as isize,
                F::zero(),
                dk.as_mut_ptr(),
                patch as isize,
                1,
            );
        }
        let dx = need_input.then(|| {
            let mut dcols = vec![F::zero(); patch * plane];
            // SAFETY: kernel read transposed (patch×c_out), gout c_out×plane.
            unsafe {
                F::gemm(
                    patch,
                    g.c_out,
                    plane,
                    F::one(),
                    k.as_ptr(),
                    1,
                    patch as isize,
                    gout.as_ptr(),
                    plane as isize,
                    1,
                    F::zero(),
                    dcols.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            if g.pointwise() {
                dcols
            } else {
                let mut d = vec![F::zero(); in_sz];
                col2im(g, &dcols, &mut d);
                d
            }
        });
        (dk, dx)
    });

    let mut dk_total = vec![F::zero(); g.c_out * patch];
    let mut dx_total = if need_input {
        Vec::with_capacity(g.n * in_sz)
    } else {
        Vec::new()
    };
    for (dk, dx) in per_image {
        for (a, b) in dk_total.iter_mut().zip(dk) {
            *a = *a + b;
        }
        if let Some(dx) = dx {
            dx_total.extend(dx);
        }
    }
    let dkernel = Tensor::new(kernel.shape().to_vec(), dk_total).expect("kernel grad size");
    let dinput = need_input
        .then(|| Tensor::new(input.shape().to_vec(), dx_total).expect("input grad size"));
    (dinput, dkernel)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for d in 0..r {
        let da = if d + a.len() >= r { a[d + a.len() - r] } else { 1 };
        let db = if d + b.len() >= r { b[d + b.len() - r] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for d in (0..r).rev() {
        if d + shape.len() < r {
            continue;
        }
        let dim = shape[d + shape.len() - r];
        strides[d] = if dim == 1 && out[d] != 1 { 0 } else { acc };
        acc *= dim;
    }
    strides
}

/// Visits the broadcast in runs: `f(o, ia, pa, ib, pb, len)` covers outputs
/// `o..o + len`, reading `a[ia + j * pa]` and `b[ib + j * pb]` with `pa, pb ∈ {0, 1}`.
fn for_each_run(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let r = out.len();
    let mut cs = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        cs[d] = cs[d + 1] * out[d + 1];
    }
    // Longest suffix on which each operand is either contiguous or constant.
    let (mut ma, mut mb): (Option<bool>, Option<bool>) = (None, None);
    let mut s = r;
    for d in (0..r).rev() {
        if out[d] != 1 {
            let ka = if sa[d] == cs[d] { Some(true) } else if sa[d] == 0 { Some(false) } else { None };
            let kb = if sb[d] == cs[d] { Some(true) } else if sb[d] == 0 { Some(false) } else { None };
            let (Some(ka), Some(kb)) = (ka, kb) else { break };
            if ma.is_some_and(|m| m != ka) || mb.is_some_and(|m| m != kb) {
                break;
            }
            ma = Some(ka);
            mb = Some(kb);
        }
        s = d;
    }
    let run: usize = out[s..].iter().product();
    let pa = usize::from(ma.unwrap_or(true));
    let pb = usize::from(mb.unwrap_or(true));
    let mut idx = vec![0usize; s];
    let mut o = 0;
    loop {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..s {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        f(o, oa, pa, ob, pb, run);
        o += run;
        let mut d = s;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![F::zero(); out.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_run(&out, &sa, &sb, |o, ia, pa, ib, pb, len| {
        let dst = &mut data[o..o + len];
        match (pa, pb) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&da[ia..ia + len]).zip(&db[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (1, _) => {
                let y = db[ib];
                for (d, &x) in dst.iter_mut().zip(&da[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (_, 1) => {
                let x = da[ia];
                for (d, &y) in dst.iter_mut().zip(&db[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            _ => dst.fill(f(da[ia], db[ib])),
        }
    });
    Tensor::new(out, data)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to<F: Scalar>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut data = vec![F::zero(); shape.iter().product()];
    let g = grad.data();
    for_each_run(out, &st, &zeros, |o, t, pt, _, _, len| {
        let src = &g[o..o + len];
        if pt == 1 {
            for (d, &x) in data[t..t + len].iter_mut().zip(src) {
                *d = *d + x;
            }
        } else {
            let s = src.iter().fold(F::zero(), |acc, &x| acc + x);
            data[t] = data[t] + s;
        }
    });
    Tensor::new(shape.to_vec(), data).expect("reduced size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[1, 5, 1, 1], &[2, 5, 3, 3]).unwrap(), vec![2, 5, 3, 3]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn channel_broadcast_and_reduce() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let s = Tensor::<f64>::new(vec![1, 3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap();
        let y = broadcast_binary(&x, &s, |a, b| a * b).unwrap();
        assert_eq!(y.data()[5], 50.0);
        assert_eq!(y.data()[12 + 9], 2100.0);
        let r = reduce_to(&Tensor::full(&[2, 3, 2, 2], 1.0), &[1, 3, 1, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    fn naive_binary(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let out = broadcast_shape(a.shape(), b.shape()).unwrap();
        let r = out.len();
        let n: usize = out.iter().product();
        (0..n)
            .map(|mut o| {
                let mut idx = vec![0; r];
                for d in (0..r).rev() {
                    idx[d] = o % out[d];
                    o /= out[d];
                }
                let at = |t: &Tensor<f64>| {
                    let sh = t.shape();
                    let mut off = 0;
                    for (k, &e) in sh.iter().enumerate() {
                        let i = idx[r - sh.len() + k];
                        off = off * e + if e == 1 { 0 } else { i };
                    }
                    t.data()[off]
                };
                at(a) * 10.0 + at(b)
            })
            .collect()
    }

    #[test]
    fn runs_match_naive_indexing() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3, 4, 5], &[1, 3, 1, 1]),
            (&[2, 1, 4, 5], &[2, 3, 4, 5]),
            (&[2, 3, 4, 5], &[5]),
            (&[2, 3, 1, 5], &[1, 1, 4, 1]),
            (&[1, 1, 1, 1], &[2, 3, 4, 5]),
            (&[3, 1], &[1, 4]),
            (&[], &[2, 2]),
        ];
        for (sa, sb) in cases {
            let a = Tensor::<f64>::from_fn(sa, |i| i as f64);
            let b = Tensor::<f64>::from_fn(sb, |i| 0.5 + i as f64);
            let got = broadcast_binary(&a, &b, |x, y| x * 10.0 + y).unwrap();
            assert_eq!(got.data(), naive_binary(&a, &b).as_slice(), "{sa:?} {sb:?}");
            let r = reduce_to(&got, sb);
            let total: f64 = got.data().iter().sum();
            assert!((r.data().iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }

    #[test]
    fn valid_conv_geometry() {
        let x = Tensor::<f64>::zeros(&[1, 2, 7, 6]);
        let k = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        let g = ConvGeom::new(&x, &k, false).unwrap();
        assert_eq!((g.ho, g.wo), (5, 4));
        assert!(ConvGeom::new(&x, &Tensor::zeros(&[4, 2, 2, 2]), true).is_err());
        assert!(ConvGeom::new(&x, &Tensor::zeros(&[4, 3, 3, 3]), true).is_err());
    }
}
