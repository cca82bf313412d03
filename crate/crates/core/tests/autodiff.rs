//! Finite-difference and structural checks for the autodiff engine (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrefine::tensor::{Graph, Padding, Tensor};

mod common;

use common::gradcheck::{check_gradients, check_gradients_step};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct double-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                * k.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 4, 5]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, k, Padding::Same).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_constant_input_interior_is_nine_c() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::full(&[1, 6, 6], 0.7));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(xv, k, Padding::Same).unwrap();
    let out = g.value(y);
    for r in 1..5 {
        for c in 1..5 {
            assert!((out.data()[r * 6 + c] - 6.3).abs() < 1e-12);
        }
    }
    // zero padding: corner sees 4 of 9 taps
    assert!((out.data()[0] - 2.8).abs() < 1e-12);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (shape, kshape, pad, padding) in [
        ([1, 5, 5], [1, 1, 3, 3], 1, Padding::Same),
        ([3, 7, 6], [2, 3, 3, 3], 1, Padding::Same),
        ([2, 6, 6], [4, 2, 5, 5], 2, Padding::Same),
        ([2, 6, 5], [3, 2, 3, 3], 0, Padding::Valid),
        ([2, 4, 4], [3, 2, 1, 1], 0, Padding::Same),
    ] {
        let x = rand_tensor(&mut rng, &shape);
        let k = rand_tensor(&mut rng, &kshape);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, padding).unwrap();
        let oracle = conv_oracle(&x, &k, pad);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let k = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(g.conv2d(x, k, Padding::Same).is_err());
    let k2 = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(g.conv2d(x, k2, Padding::Same).is_err());
}

#[test]
fn relu_and_abs_values_and_subgradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);

    let y = g.param(Tensor::new(vec![3], vec![3.0, -3.0, 0.0]).unwrap());
    let a = g.abs(y);
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(y).unwrap().data(), &[1.0, -1.0, 0.0]);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // keep |x| away from 0 so relu/abs kinks are not straddled by h
    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    };
    let a = away(&mut rng, &[2, 3, 2, 2]);
    let b = away(&mut rng, &[1, 3, 1, 1]);
    let worst = check_gradients(&[a.clone(), b.clone()], |g, v| {
        let m = g.mul(v[0], v[1]).unwrap();
        let s = g.add(m, v[1]).unwrap();
        let d = g.sub(s, v[0]).unwrap();
        let r = g.relu(d);
        let ab = g.abs(d);
        let p = g.pow_int(d, 3);
        let t = g.add(r, ab).unwrap();
        let t = g.add(t, p).unwrap();
        let t = g.scale(t, 0.5);
        g.mean(t)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");

    let z = away(&mut rng, &[5]);
    let worst = check_gradients(&[z], |g, v| {
        let p = g.pow_int(v[0], 3);
        g.sum(p)
    });
    assert!(worst < 1e-4, "pow_int worst relative error {worst}");
}

#[test]
fn shape_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let w = rand_tensor(&mut rng, &[144]);
    let worst = check_gradients(&[a, b, w], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]).unwrap();
        let s = g.slice_channels(c, 1, 3).unwrap();
        let m = g.mean_channels(c).unwrap();
        let cat = g.concat_channels(&[s, m]).unwrap();
        let rep = g.repeat_batch(cat, 2).unwrap();
        let flat = g.reshape(rep, &[144]).unwrap();
        let prod = g.mul(flat, v[2]).unwrap();
        let sq = g.pow_int(prod, 2);
        g.sum(sq)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (xs, ks, pad) in [
        ([2, 2, 5, 4], [3, 2, 3, 3], Padding::Same),
        ([1, 3, 4, 4], [2, 3, 1, 1], Padding::Same),
        ([2, 1, 6, 6], [2, 1, 3, 3], Padding::Valid),
    ] {
        let x = rand_tensor(&mut rng, &xs);
        let k = rand_tensor(&mut rng, &ks);
        let worst = check_gradients(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], pad).unwrap();
            let sq = g.pow_int(y, 2);
            g.mean(sq)
        });
        assert!(worst < 1e-4, "conv worst relative error {worst}");
    }
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 5]);
    let k1 = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[1, 3, 1, 1]);
    let k2 = rand_tensor(&mut rng, &[3, 3, 3, 3]);
    let s2 = rand_tensor(&mut rng, &[1, 3, 1, 1]);
    let k3 = rand_tensor(&mut rng, &[1, 3, 3, 3]);
    let worst = check_gradients(&[x, k1, b1, k2, s2, k3], |g, v| {
        let h = g.conv2d(v[0], v[1], Padding::Same).unwrap();
        let h = g.add(h, v[2]).unwrap();
        let h = g.pow_int(h, 2); // smooth stand-in for relu
        let h2 = g.conv2d(h, v[3], Padding::Same).unwrap();
        let h2 = g.mul(h2, v[4]).unwrap();
        let h2 = g.add(h2, h).unwrap(); // residual
        let o = g.conv2d(h2, v[5], Padding::Same).unwrap();
        let r = g.sub(v[0], o).unwrap();
        let sq = g.pow_int(r, 2);
        g.mean(sq)
    });
    assert!(worst < 1e-4, "network worst relative error {worst}");
}

#[test]
fn sum_of_weighted_inputs_gives_inputs() {
    let x = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
    let mut g = Graph::new();
    let w = g.param(Tensor::full(&[4], 0.3));
    let xv = g.constant(x.clone());
    let p = g.mul(w, xv).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(w).unwrap(), &x);
    assert!(grads.get(xv).is_none());
}

#[test]
fn residual_connection_sums_branch_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
    let branch = g.scale(x, 3.0);
    let y = g.add(branch, x).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn injected_zeros_cut_off_upstream_parameters() {
    let mut g = Graph::new();
    let w1 = g.param(Tensor::full(&[3], 2.0));
    let w2 = g.param(Tensor::full(&[3], -1.0));
    let mid = g.scale(w1, 5.0);
    let both = g.add(mid, w2).unwrap();
    let sq = g.pow_int(both, 2);
    let l = g.sum(sq);
    g.inject(mid, Tensor::zeros(&[3])).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(w1).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get(w2).unwrap().data().iter().all(|&v| v != 0.0));
    assert!(g.inject(mid, Tensor::zeros(&[4])).is_err());
}

#[test]
fn injection_of_true_gradient_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[1, 1, 6, 6]));
    let k1 = g.param(rand_tensor(&mut rng, &[4, 1, 3, 3]));
    let k2 = g.param(rand_tensor(&mut rng, &[2, 4, 3, 3]));
    let h = g.conv2d(x, k1, Padding::Same).unwrap();
    let h = g.relu(h);
    let mid = g.conv2d(h, k2, Padding::Same).unwrap();
    let sq = g.pow_int(mid, 2);
    let l = g.mean(sq);
    let plain = g.backward(l).unwrap();
    let at_mid = g.backward_to(l, &[mid]).unwrap().get(mid).unwrap().clone();
    g.inject(mid, at_mid.clone()).unwrap();
    let injected = g.backward(l).unwrap();
    for p in [k1, k2] {
        assert_eq!(plain.get(p).unwrap().data(), injected.get(p).unwrap().data());
    }
    let seeded = g.backward_seeded(mid, at_mid).unwrap();
    for p in [k1, k2] {
        assert_eq!(plain.get(p).unwrap().data(), seeded.get(p).unwrap().data());
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2]));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn graph_construction_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[3, 2, 8, 8]));
        let k = g.param(rand_tensor(&mut rng, &[5, 2, 3, 3]));
        let y = g.conv2d(x, k, Padding::Same).unwrap();
        let l = g.mean(y);
        let gr = g.backward(l).unwrap();
        (g.value(y).clone(), gr.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

fn mlp_params(rng: &mut ChaCha8Rng, width: usize, res: usize) -> Vec<Tensor<f64>> {
    let mut v = vec![rand_tensor(rng, &[width, 2, 1, 1]), rand_tensor(rng, &[1, width, 1, 1])];
    for _ in 0..res {
        v.push(rand_tensor(rng, &[width, width, 1, 1]).map(|x| x * 0.5));
        v.push(rand_tensor(rng, &[1, width, 1, 1]));
    }
    v.push(rand_tensor(rng, &[1, width + 1, 1, 1]));
    v.push(rand_tensor(rng, &[1, 1, 1, 1]));
    v
}

#[test]
fn fused_pixel_network_matches_layered_graph() {
    use statrefine::nets::{Arch, FinalInit, Net};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = Net::<f64>::init(Arch::Consistency { width: 5 }, 3, FinalInit::Small).unwrap();
    net.params = mlp_params(&mut rng, 5, 4);
    // more pixels than one tile, with a ragged last tile
    let x = rand_tensor(&mut rng, &[3, 1, 10, 13]);
    let y = rand_tensor(&mut rng, &[3, 1, 10, 13]);
    let w = rand_tensor(&mut rng, &[3, 1, 10, 13]);
    let run = |fused: bool| {
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let (xv, yv, wv) = (g.param(x.clone()), g.param(y.clone()), g.constant(w.clone()));
        let o = if fused {
            net.forward_pair(&mut g, &p, xv, yv).unwrap()
        } else {
            net.forward_pair_layers(&mut g, &p, xv, yv).unwrap()
        };
        let m = g.mul(o, wv).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        let mut all = vec![g.value(o).clone()];
        all.extend(p.iter().chain([&xv, &yv]).map(|v| grads.get(*v).unwrap().clone()));
        all
    };
    for (a, b) in run(true).iter().zip(run(false)) {
        assert_eq!(a.shape(), b.shape());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12 * (1.0 + v.abs()), "{u} vs {v}");
        }
    }
}

#[test]
fn fused_pixel_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut inputs = vec![rand_tensor(&mut rng, &[2, 1, 3, 3]), rand_tensor(&mut rng, &[2, 1, 3, 3])];
    inputs.extend(mlp_params(&mut rng, 4, 2));
    let worst = check_gradients_step(
        &inputs,
        |g, v| {
            let o = g.pixel_mlp(v[0], v[1], &v[2..]).unwrap();
            let sq = g.pow_int(o, 2);
            g.mean(sq)
        },
        1e-6,
    );
    assert!(worst < 1e-4, "pixel network worst relative error {worst}");
}
