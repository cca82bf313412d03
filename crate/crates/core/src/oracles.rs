//! Brute-force and closed-form reference checks.
//!
//! A [`DiscreteWorld`] is small enough to enumerate every `(x, n, z)`
//! configuration exactly, so conditional expectations of the auxiliary signal
//! can be compared against the posterior-weighted per-pixel map without any
//! learning involved.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit::{fit_consistency, AuditConfig};
use crate::error::{Error, Result};
use crate::nets::{Arch, FinalInit, Net};
use crate::rng::{derive_seed, stage_rng};
use crate::tensor::Tensor;

pub const MAX_PIXELS: usize = 3;
pub const MAX_SYMBOLS: usize = 5;

/// `p(v_i | values at `given`)` as a list of rows keyed by those values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditional {
    pub given: Vec<usize>,
    pub symbols: Vec<i64>,
    pub rows: Vec<(Vec<i64>, Vec<f64>)>,
}

impl Conditional {
    fn row(&self, key: &[i64]) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(k, _)| k.as_slice() == key)
            .map(|(_, p)| p.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteWorld {
    /// Clean-value alphabet per pixel.
    pub x_symbols: Vec<Vec<i64>>,
    /// Joint prior over `x`, row-major over pixels.
    pub prior: Vec<f64>,
    /// `p(n_i | x_given)`.
    pub noise: Vec<Conditional>,
    /// `p(z_i | y_given)`.
    pub aux: Vec<Conditional>,
}

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("{what} does not normalize")));
    }
    Ok(())
}

fn odometer(sizes: &[usize], f: &mut dyn FnMut(&[usize])) {
    if sizes.iter().any(|&s| s == 0) {
        return;
    }
    let mut idx = vec![0; sizes.len()];
    loop {
        f(&idx);
        let mut d = sizes.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < sizes[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl DiscreteWorld {
    pub fn pixels(&self) -> usize {
        self.x_symbols.len()
    }

    /// Structural and normalization checks. Assumption violations are
    /// allowed here; see [`DiscreteWorld::satisfies_assumptions`].
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if n == 0 || n > MAX_PIXELS {
            return Err(Error::config(format!("world has {n} pixels (1..={MAX_PIXELS})")));
        }
        if self.noise.len() != n || self.aux.len() != n {
            return Err(Error::config("one noise and one aux table per pixel"));
        }
        let alphabets = self
            .x_symbols
            .iter()
            .chain(self.noise.iter().map(|c| &c.symbols))
            .chain(self.aux.iter().map(|c| &c.symbols));
        for a in alphabets {
            if a.is_empty() || a.len() > MAX_SYMBOLS {
                return Err(Error::config(format!("alphabet size {} (1..={MAX_SYMBOLS})", a.len())));
            }
        }
        let size: usize = self.x_symbols.iter().map(Vec::len).product();
        if self.prior.len() != size {
            return Err(Error::config(format!("prior has {} entries, need {size}", self.prior.len())));
        }
        check_dist(&self.prior, "prior")?;
        for c in self.noise.iter().chain(&self.aux) {
            if c.given.iter().any(|&g| g >= n) {
                return Err(Error::config("conditional refers to a missing pixel"));
            }
            for (k, p) in &c.rows {
                if k.len() != c.given.len() || p.len() != c.symbols.len() {
                    return Err(Error::config("conditional row has the wrong size"));
                }
                check_dist(p, "conditional row")?;
            }
        }
        Ok(())
    }

    /// Noise of pixel `i` indexed by `x_i` only, aux by `y_i` only.
    pub fn satisfies_assumptions(&self) -> bool {
        (0..self.pixels()).all(|i| self.noise[i].given == [i] && self.aux[i].given == [i])
    }

    /// Calls `f(x, z, ŷ, p)` for every configuration with `p > 0`.
    fn for_each_config(&self, f: &mut dyn FnMut(&[i64], &[i64], &[i64], f64)) -> Result<()> {
        self.validate()?;
        let n = self.pixels();
        let xs: Vec<usize> = self.x_symbols.iter().map(Vec::len).collect();
        let ns: Vec<usize> = self.noise.iter().map(|c| c.symbols.len()).collect();
        let zs: Vec<usize> = self.aux.iter().map(|c| c.symbols.len()).collect();
        let mut missing = None;
        let mut flat = 0usize;
        odometer(&xs, &mut |xi| {
            let px = self.prior[flat];
            flat += 1;
            if px == 0.0 || missing.is_some() {
                return;
            }
            let x: Vec<i64> = (0..n).map(|i| self.x_symbols[i][xi[i]]).collect();
            odometer(&ns, &mut |ni| {
                if missing.is_some() {
                    return;
                }
                let mut pn = px;
                let mut y = vec![0i64; n];
                for i in 0..n {
                    let c = &self.noise[i];
                    let key: Vec<i64> = c.given.iter().map(|&g| x[g]).collect();
                    match c.row(&key) {
                        Some(r) => pn *= r[ni[i]],
                        None => {
                            missing = Some(format!("noise table {i} has no row for {key:?}"));
                            return;
                        }
                    }
                    y[i] = x[i] + c.symbols[ni[i]];
                }
                if pn == 0.0 {
                    return;
                }
                odometer(&zs, &mut |zi| {
                    if missing.is_some() {
                        return;
                    }
                    let mut p = pn;
                    let mut z = vec![0i64; n];
                    for i in 0..n {
                        let c = &self.aux[i];
                        let key: Vec<i64> = c.given.iter().map(|&g| y[g]).collect();
                        match c.row(&key) {
                            Some(r) => p *= r[zi[i]],
                            None => {
                                missing = Some(format!("aux table {i} has no row for {key:?}"));
                                return;
                            }
                        }
                        z[i] = c.symbols[zi[i]];
                    }
                    if p > 0.0 {
                        let yh: Vec<i64> = (0..n).map(|i| y[i] + z[i]).collect();
                        f(&x, &z, &yh, p);
                    }
                });
            });
        });
        match missing {
            Some(m) => Err(Error::config(m)),
            None => Ok(()),
        }
    }

    /// Draws one `(x, y, z)` configuration.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<i64>, Vec<i64>, Vec<i64>)> {
        let n = self.pixels();
        let draw = |p: &[f64], rng: &mut R| -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    return k;
                }
            }
            p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
        };
        let mut flat = draw(&self.prior, rng);
        let mut x = vec![0; n];
        for i in (0..n).rev() {
            let s = self.x_symbols[i].len();
            x[i] = self.x_symbols[i][flat % s];
            flat /= s;
        }
        let mut y = vec![0; n];
        for i in 0..n {
            let c = &self.noise[i];
            let key: Vec<i64> = c.given.iter().map(|&g| x[g]).collect();
            let r = c.row(&key).ok_or_else(|| Error::config("missing noise row"))?;
            y[i] = x[i] + c.symbols[draw(r, rng)];
        }
        let mut z = vec![0; n];
        for i in 0..n {
            let c = &self.aux[i];
            let key: Vec<i64> = c.given.iter().map(|&g| y[g]).collect();
            let r = c.row(&key).ok_or_else(|| Error::config("missing aux row"))?;
            z[i] = c.symbols[draw(r, rng)];
        }
        Ok((x, y, z))
    }

    /// Every attainable `ŷ` with its probability.
    pub fn observations(&self) -> Result<Vec<(Vec<i64>, f64)>> {
        let mut m: HashMap<Vec<i64>, f64> = HashMap::new();
        self.for_each_config(&mut |_, _, yh, p| *m.entry(yh.to_vec()).or_default() += p)?;
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(v)
    }
}

/// Builds a conditional keyed by the given pixel's own value.
fn own_table<R: Rng + ?Sized>(rng: &mut R, pixel: usize, keys: &[i64], symbols: Vec<i64>) -> Conditional {
    let rows = keys.iter().map(|&k| (vec![k], random_dist(rng, symbols.len()))).collect();
    Conditional {
        given: vec![pixel],
        symbols,
        rows,
    }
}

fn random_dist<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() + 0.05 })
        .collect();
    if p.iter().all(|&v| v == 0.0) {
        p[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// A sorted random subset of `lo..=hi` with 1 to `MAX_SYMBOLS` elements.
fn distinct<R: Rng + ?Sized>(rng: &mut R, lo: i64, hi: i64) -> Vec<i64> {
    let k = rng.random_range(1..=MAX_SYMBOLS);
    let mut all: Vec<i64> = (lo..=hi).collect();
    for i in 0..k {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    let mut v = all[..k].to_vec();
    v.sort_unstable();
    v
}

/// A random world satisfying both assumptions.
pub fn random_world<R: Rng + ?Sized>(rng: &mut R) -> DiscreteWorld {
    let n = rng.random_range(1..=MAX_PIXELS);
    let x_symbols: Vec<Vec<i64>> = (0..n)
        .map(|_| distinct(rng, 0, 12))
        .collect();
    let size: usize = x_symbols.iter().map(Vec::len).product();
    let prior = random_dist(rng, size);
    let mut noise = Vec::with_capacity(n);
    let mut aux = Vec::with_capacity(n);
    for (i, xs) in x_symbols.iter().enumerate() {
        let ns = distinct(rng, -4, 4);
        let mut ys: Vec<i64> = xs.iter().flat_map(|x| ns.iter().map(move |d| x + d)).collect();
        ys.sort_unstable();
        ys.dedup();
        noise.push(own_table(rng, i, xs, ns));
        let zs = distinct(rng, -2, 2);
        aux.push(own_table(rng, i, &ys, zs));
    }
    DiscreteWorld {
        x_symbols,
        prior,
        noise,
        aux,
    }
}

/// `p(x_i | ŷ)` for each pixel, as `(symbol, probability)` pairs.
pub fn enumerate_posterior(world: &DiscreteWorld, yhat: &[i64]) -> Result<Vec<Vec<(i64, f64)>>> {
    if yhat.len() != world.pixels() {
        return Err(Error::shape(format!("ŷ has {} pixels, world {}", yhat.len(), world.pixels())));
    }
    let mut total = 0.0;
    let mut acc: Vec<HashMap<i64, f64>> = vec![HashMap::new(); world.pixels()];
    world.for_each_config(&mut |x, _, yh, p| {
        if yh == yhat {
            total += p;
            for (i, a) in acc.iter_mut().enumerate() {
                *a.entry(x[i]).or_default() += p;
            }
        }
    })?;
    if total == 0.0 {
        return Err(Error::Unattainable(format!("{yhat:?}")));
    }
    Ok(acc
        .into_iter()
        .map(|m| {
            let mut v: Vec<_> = m.into_iter().map(|(k, p)| (k, p / total)).collect();
            v.sort_by_key(|e| e.0);
            v
        })
        .collect())
}

/// Largest `|E[f(z_i)|ŷ] − Σ_{x_i} p(x_i|ŷ) G(x_i, ŷ_i)|` over attainable `ŷ`
/// and pixels, with `G(x_i, ŷ_i) = E[f(z_i) | x_i, ŷ_i]`.
pub fn verify_consistency(world: &DiscreteWorld, f: &dyn Fn(i64) -> f64) -> Result<f64> {
    let n = world.pixels();
    let mut p_obs: HashMap<Vec<i64>, f64> = HashMap::new();
    let mut lhs: HashMap<(Vec<i64>, usize), f64> = HashMap::new();
    let mut post: HashMap<(Vec<i64>, usize, i64), f64> = HashMap::new();
    let mut g: HashMap<(usize, i64, i64), (f64, f64)> = HashMap::new();
    world.for_each_config(&mut |x, z, yh, p| {
        *p_obs.entry(yh.to_vec()).or_default() += p;
        for i in 0..n {
            let fz = f(z[i]);
            *lhs.entry((yh.to_vec(), i)).or_default() += p * fz;
            *post.entry((yh.to_vec(), i, x[i])).or_default() += p;
            let e = g.entry((i, x[i], yh[i])).or_default();
            e.0 += p * fz;
            e.1 += p;
        }
    })?;
    let mut rhs: HashMap<(Vec<i64>, usize), f64> = HashMap::new();
    for ((yh, i, xi), p) in &post {
        let (num, den) = g[&(*i, *xi, yh[*i])];
        *rhs.entry((yh.clone(), *i)).or_default() += p / p_obs[yh] * (num / den);
    }
    let mut worst: f64 = 0.0;
    for ((yh, i), num) in &lhs {
        let l = num / p_obs[yh];
        worst = worst.max((l - rhs[&(yh.clone(), *i)]).abs());
    }
    Ok(worst)
}

fn table(given: Vec<usize>, symbols: Vec<i64>, rows: Vec<(Vec<i64>, Vec<f64>)>) -> Conditional {
    Conditional { given, symbols, rows }
}

/// Two pixels where pixel 0's noise also depends on `x_1`.
pub fn world_violating_noise() -> DiscreteWorld {
    DiscreteWorld {
        x_symbols: vec![vec![0], vec![0, 10]],
        prior: vec![0.5, 0.5],
        noise: vec![
            table(
                vec![0, 1],
                vec![0, 2],
                vec![(vec![0, 0], vec![0.5, 0.5]), (vec![0, 10], vec![0.9, 0.1])],
            ),
            table(vec![1], vec![0], vec![(vec![0], vec![1.0]), (vec![10], vec![1.0])]),
        ],
        aux: vec![
            table(
                vec![0],
                vec![-1, 1],
                vec![(vec![0], vec![0.5, 0.5]), (vec![2], vec![0.5, 0.5])],
            ),
            table(vec![1], vec![0], vec![(vec![0], vec![1.0]), (vec![10], vec![1.0])]),
        ],
    }
}

/// Two pixels where pixel 0's auxiliary value also depends on `y_1`.
pub fn world_violating_aux() -> DiscreteWorld {
    DiscreteWorld {
        x_symbols: vec![vec![0], vec![0, 10]],
        prior: vec![0.5, 0.5],
        noise: vec![
            table(vec![0], vec![0, 2], vec![(vec![0], vec![0.5, 0.5])]),
            table(vec![1], vec![0], vec![(vec![0], vec![1.0]), (vec![10], vec![1.0])]),
        ],
        aux: vec![
            table(
                vec![0, 1],
                vec![-1, 1],
                vec![
                    (vec![0, 0], vec![0.5, 0.5]),
                    (vec![2, 0], vec![0.5, 0.5]),
                    (vec![0, 10], vec![0.1, 0.9]),
                    (vec![2, 10], vec![0.5, 0.5]),
                ],
            ),
            table(vec![1], vec![0], vec![(vec![0], vec![1.0]), (vec![10], vec![1.0])]),
        ],
    }
}

/// Per-pixel Monte Carlo estimate of `p(x_i | ŷ)` from `samples` draws,
/// keeping only draws that land on `yhat`. Returns the estimates and the
/// number of accepted draws.
pub fn monte_carlo_posterior(
    world: &DiscreteWorld,
    yhat: &[i64],
    samples: usize,
    seed: u64,
) -> Result<(Vec<HashMap<i64, f64>>, usize)> {
    let mut rng = stage_rng(seed, "oracle-mc", 0);
    let mut counts: Vec<HashMap<i64, f64>> = vec![HashMap::new(); world.pixels()];
    let mut kept = 0usize;
    for _ in 0..samples {
        let (x, y, z) = world.sample(&mut rng)?;
        if y.iter().zip(&z).map(|(a, b)| a + b).eq(yhat.iter().copied()) {
            kept += 1;
            for (i, c) in counts.iter_mut().enumerate() {
                *c.entry(x[i]).or_default() += 1.0;
            }
        }
    }
    for c in &mut counts {
        c.values_mut().for_each(|v| *v /= kept.max(1) as f64);
    }
    Ok((counts, kept))
}

/// `n ~ N(0, σ_n²)`, `z ~ N(0, σ_z²)` per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianToy {
    pub sigma_n: f64,
    pub sigma_z: f64,
}

impl GaussianToy {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n > 0.0 && self.sigma_z > 0.0 && self.sigma_z < self.sigma_n) {
            return Err(Error::config("toy needs 0 < sigma_z < sigma_n"));
        }
        Ok(())
    }

    /// Slope of `E[z_i | x_i, ŷ_i]` in `ŷ_i − x_i`.
    pub fn coefficient(&self) -> f64 {
        gaussian_toy_coefficient(self.sigma_n, self.sigma_z)
    }

    /// `(n, z)` for one pixel.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let n = Normal::new(0.0, self.sigma_n).expect("sigma_n").sample(rng);
        let z = Normal::new(0.0, self.sigma_z).expect("sigma_z").sample(rng);
        (n, z)
    }

    /// Least-squares slope of `z` on `ŷ − x` over `samples` draws.
    pub fn monte_carlo_slope(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = stage_rng(seed, "toy-mc", 0);
        let (mut sd, mut sz, mut sdd, mut sdz) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..samples {
            let (n, z) = self.sample(&mut rng);
            let d = n + z;
            sd += d;
            sz += z;
            sdd += d * d;
            sdz += d * z;
        }
        let m = samples as f64;
        (sdz - sd * sz / m) / (sdd - sd * sd / m)
    }
}

pub fn gaussian_toy_coefficient(sigma_n: f64, sigma_z: f64) -> f64 {
    let (a, b) = (sigma_z * sigma_z, sigma_n * sigma_n);
    if a == 0.0 {
        return 0.0;
    }
    a / (a + b)
}

/// Partial slopes of a fitted consistency net.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFit {
    pub d_xhat: f64,
    pub d_yhat: f64,
    pub final_loss: f64,
}

/// Spread of the per-image clean level around its image mean.
const TOY_PRIOR_STD: f64 = 0.05;

/// One batch of toy images on the unit scale (noise std divided by 256).
/// Each image has its own prior mean, so the posterior mean and `ŷ` vary
/// independently. Returns `(x̂, ŷ, z)` as `[N,1,c,c]` tensors.
fn toy_batch(toy: &GaussianToy, batch: usize, crop: usize, seed: u64, stage: &str, step: usize) -> [Tensor<f32>; 3] {
    let (sn, sz) = (toy.sigma_n / 256.0, toy.sigma_z / 256.0);
    let s2 = sn * sn + sz * sz;
    let shrink = TOY_PRIOR_STD.powi(2) / (TOY_PRIOR_STD.powi(2) + s2);
    let prior = Normal::new(0.0, TOY_PRIOR_STD).expect("prior");
    let plane = crop * crop;
    let mut xh = Vec::with_capacity(batch * plane);
    let mut yh = Vec::with_capacity(batch * plane);
    let mut zs = Vec::with_capacity(batch * plane);
    for b in 0..batch {
        let mut rng = stage_rng(seed, stage, (step * batch + b) as u64);
        let mu: f64 = rng.random_range(0.3..0.7);
        for _ in 0..plane {
            let x = mu + prior.sample(&mut rng);
            let (n, z) = toy.sample(&mut rng);
            let (n, z) = (n / 256.0, z / 256.0);
            let y = x + n + z;
            xh.push((mu + shrink * (y - mu)) as f32);
            yh.push(y as f32);
            zs.push(z as f32);
        }
    }
    let shape = vec![batch, 1, crop, crop];
    [
        Tensor::new(shape.clone(), xh).expect("toy"),
        Tensor::new(shape.clone(), yh).expect("toy"),
        Tensor::new(shape, zs).expect("toy"),
    ]
}

/// Fits one consistency net on toy data with the posterior mean as a
/// single-output denoiser and raw `z` as the estimate, then regresses its
/// output on `(x̂, ŷ)` over fresh batches.
pub fn fit_toy_consistency(toy: &GaussianToy, cfg: &AuditConfig, seed: u64) -> Result<ToyFit> {
    toy.validate()?;
    cfg.validate()?;
    let mut nets = vec![Net::init(
        Arch::Consistency { width: cfg.g_width },
        derive_seed(seed, "toy-consistency", 0),
        FinalInit::Small,
    )?];
    let sample = |step: usize| -> Result<crate::audit::FitSample> {
        let [xh, yh, z] = toy_batch(toy, cfg.batch, cfg.crop, seed, "toy-train", step);
        Ok((xh, yh, z))
    };
    let final_loss = fit_consistency(&mut nets, cfg.steps, &cfg.lr, &sample)?;
    // normal equations for g ≈ a + p x̂ + q ŷ
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for step in 0..8 {
        let [xh, yh, _] = toy_batch(toy, cfg.batch, cfg.crop, seed, "toy-eval", step);
        let out = nets[0].eval_pair(&xh, &yh)?;
        for ((&a, &b), &o) in xh.data().iter().zip(yh.data()).zip(out.data()) {
            let row = [1.0, a as f64, b as f64];
            for r in 0..3 {
                for c in 0..3 {
                    ata[r][c] += row[r] * row[c];
                }
                atb[r] += row[r] * o as f64;
            }
        }
    }
    let sol = solve3(ata, atb).ok_or_else(|| Error::config("toy regression is singular"))?;
    Ok(ToyFit {
        d_xhat: sol[1],
        d_yhat: sol[2],
        final_loss,
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_coefficient_is_a_tenth() {
        assert_eq!(gaussian_toy_coefficient(6.0, 2.0), 0.1);
        assert_eq!(gaussian_toy_coefficient(6.0, 0.0), 0.0);
    }

    #[test]
    fn solve3_recovers_known() {
        let a = [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]];
        let x = [1.0, -2.0, 0.5];
        let b = [0, 1, 2].map(|r| (0..3).map(|c| a[r][c] * x[c]).sum());
        let s = solve3(a, b).unwrap();
        for i in 0..3 {
            assert!((s[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn violating_worlds_are_flagged() {
        assert!(!world_violating_noise().satisfies_assumptions());
        assert!(!world_violating_aux().satisfies_assumptions());
        world_violating_noise().validate().unwrap();
        world_violating_aux().validate().unwrap();
    }
}

/// Expected outcome of a world fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    /// Residual below [`CONSISTENT_TOL`].
    Consistent,
    /// Residual above [`VIOLATION_TOL`].
    Violated,
}

pub const CONSISTENT_TOL: f64 = 1e-12;
pub const VIOLATION_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFixture {
    pub name: String,
    pub expect: Expect,
    pub world: DiscreteWorld,
}

impl WorldFixture {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fixture serializes")
    }
}

/// Largest residual over `f(z) = z, z², z³`.
pub fn consistency_residual(world: &DiscreteWorld) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in 1..=3 {
        worst = worst.max(verify_consistency(world, &|z| (z as f64).powi(p))?);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureResult {
    pub name: String,
    pub expect: Expect,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub random_worlds: usize,
    pub random_worst: f64,
    pub noise_violation: f64,
    pub aux_violation: f64,
    pub toy_coefficient: f64,
    pub toy_mc_slope: f64,
    pub fixtures: Vec<FixtureResult>,
}

pub const TOY_MC_SAMPLES: usize = 1_000_000;
pub const TOY_MC_TOL: f64 = 0.003;

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.random_worst < CONSISTENT_TOL
            && self.noise_violation > VIOLATION_TOL
            && self.aux_violation > VIOLATION_TOL
            && self.toy_coefficient == 0.1
            && (self.toy_mc_slope - 0.1).abs() < TOY_MC_TOL
            && self.fixtures.iter().all(|f| f.pass)
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "random worlds ({}): max residual {:.3e}\nnoise-assumption violation: residual {:.3e}\naux-assumption violation: residual {:.3e}\ntoy coefficient (6, 2): {}\ntoy Monte Carlo slope: {:.5}\n",
            self.random_worlds, self.random_worst, self.noise_violation, self.aux_violation, self.toy_coefficient, self.toy_mc_slope
        );
        for f in &self.fixtures {
            s.push_str(&format!(
                "fixture {} ({:?}): residual {:.3e} {}\n",
                f.name,
                f.expect,
                f.residual,
                if f.pass { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(if self.pass() { "all oracles pass\n" } else { "ORACLE FAILURE\n" });
        s
    }
}

/// Random consistent worlds, the two constructed violations, the toy
/// coefficient and any fixtures.
pub fn run_oracle_suite(worlds: usize, seed: u64, fixtures: &[WorldFixture]) -> Result<OracleReport> {
    let residuals = crate::parallel::map_indices(worlds, |i| {
        let mut rng = stage_rng(seed, "oracle-world", i as u64);
        consistency_residual(&random_world(&mut rng))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let fixtures = fixtures
        .iter()
        .map(|f| {
            let residual = consistency_residual(&f.world)?;
            let pass = match f.expect {
                Expect::Consistent => residual < CONSISTENT_TOL,
                Expect::Violated => residual > VIOLATION_TOL,
            };
            Ok(FixtureResult {
                name: f.name.clone(),
                expect: f.expect,
                residual,
                pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let toy = GaussianToy {
        sigma_n: 6.0,
        sigma_z: 2.0,
    };
    Ok(OracleReport {
        random_worlds: worlds,
        random_worst: residuals.into_iter().fold(0.0, f64::max),
        noise_violation: consistency_residual(&world_violating_noise())?,
        aux_violation: consistency_residual(&world_violating_aux())?,
        toy_coefficient: toy.coefficient(),
        toy_mc_slope: toy.monte_carlo_slope(TOY_MC_SAMPLES, seed),
        fixtures,
    })
}
