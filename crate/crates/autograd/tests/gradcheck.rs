//! Finite-difference and brute-force cross-checks for every op.
//!
//! The reference computations here read raw buffers only; none of them goes
//! through the op under test.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zaplab_autograd::{grad, Tensor, INSTANCE_NORM_EPS};

const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // sum of uniforms is plenty Gaussian-ish for a gradient check
    let data = (0..n)
        .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).sum::<f64>() * 1.7)
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Norm-wise relative error; differences below the 1e-8 absolute floor count as zero.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    if diff <= 1e-8 {
        return 0.0;
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb)
}

/// Central differences of `f` with respect to `inputs[which]`.
fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let base = inputs[which].to_vec();
    (0..base.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut args = inputs.to_vec();
                args[which] = Tensor::new(inputs[which].shape(), v).unwrap();
                f(&args)
            };
            (eval(H) - eval(-H)) / (2.0 * H)
        })
        .collect()
}

/// Checks every input gradient of the scalar function built by `build`.
fn check(name: &str, inputs: Vec<Tensor>, build: impl Fn(&[Tensor]) -> Tensor) {
    let params: Vec<Tensor> = inputs.iter().map(|t| t.leaf_with_grad(true)).collect();
    let loss = build(&params);
    let analytic = grad(&loss, &params, false).unwrap();
    let f = |args: &[Tensor]| build(args).item();
    for (k, g) in analytic.as_slice().iter().enumerate() {
        let numeric = numeric_grad(&f, &inputs, k);
        let err = rel_err(g.data(), &numeric);
        assert!(err < 1e-4, "{name}: input {k} rel err {err:e}");
    }
}

/// Checks Hessian-vector products: d/dx <grad f(x), v> against finite
/// differences of the analytic gradient.
fn check_second_order(name: &str, inputs: Vec<Tensor>, build: impl Fn(&[Tensor]) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dirs: Vec<Tensor> = inputs.iter().map(|t| randn(&mut rng, t.shape())).collect();
    let first_order = |args: &[Tensor]| -> Vec<Vec<f64>> {
        let params: Vec<Tensor> = args.iter().map(|t| t.leaf_with_grad(true)).collect();
        let g = grad(&build(&params), &params, false).unwrap();
        g.as_slice().iter().map(|t| t.to_vec()).collect()
    };
    let params: Vec<Tensor> = inputs.iter().map(|t| t.leaf_with_grad(true)).collect();
    let g = grad(&build(&params), &params, true).unwrap();
    let mut gv = Tensor::scalar(0.0);
    for (gi, vi) in g.as_slice().iter().zip(&dirs) {
        gv = gv.add(&gi.mul(vi).unwrap().sum()).unwrap();
    }
    let hv = grad(&gv, &params, false).unwrap();

    // Numeric Hv = (g(x + h v) - g(x - h v)) / 2h.
    let shifted = |sign: f64| {
        let args: Vec<Tensor> = inputs
            .iter()
            .zip(&dirs)
            .map(|(x, v)| {
                let d = x.data().iter().zip(v.data()).map(|(a, b)| a + sign * 1e-4 * b).collect();
                Tensor::new(x.shape(), d).unwrap()
            })
            .collect();
        first_order(&args)
    };
    let (plus, minus) = (shifted(1.0), shifted(-1.0));
    for k in 0..inputs.len() {
        let numeric: Vec<f64> = plus[k].iter().zip(&minus[k]).map(|(p, m)| (p - m) / 2e-4).collect();
        let err = rel_err(hv[k].data(), &numeric);
        assert!(err < 1e-3, "{name}: second order input {k} rel err {err:e}");
    }
}

/// Projects an op's output onto a fixed random direction to get a scalar.
fn project(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = randn(&mut rng, out.shape());
    out.mul(&r).unwrap().sum()
}

fn brute_conv(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * wd];
    for b in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = i as isize + ki as isize - p;
                                let s = j as isize + kj as isize - p;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * ci + c) * h + r as usize) * wd + s as usize]
                                    * w.data()[((o * ci + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((b * co + o) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
    assert_eq!(x.conv2d(&w).unwrap().data(), x.data());
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[1, 2, 4, 4]).leaf_with_grad(true);
    let w = Tensor::zeros(&[3, 2, 3, 3]);
    let y = x.conv2d(&w).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let g = grad(&project(&y, 2), &[x], false).unwrap();
    assert!(g[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[1, 2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let fast = x.conv2d(&w).unwrap();
    let slow = brute_conv(&x, &w);
    for (a, b) in fast.data().iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch() {
    assert!(Tensor::zeros(&[1, 2, 4, 4]).conv2d(&Tensor::zeros(&[3, 1, 3, 3])).is_err());
    assert!(Tensor::zeros(&[1, 2, 4, 4]).conv2d(&Tensor::zeros(&[3, 2, 2, 2])).is_err());
}

#[test]
fn linear_matches_hand_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 5]);
    let w = randn(&mut rng, &[4, 5]);
    let b = randn(&mut rng, &[4]);
    let y = x.linear(&w, &b).unwrap();
    for i in 0..3 {
        for c in 0..4 {
            let mut acc = b.data()[c];
            for d in 0..5 {
                acc += x.data()[i * 5 + d] * w.data()[c * 5 + d];
            }
            assert!((y.data()[i * 4 + c] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn maxpool_routes_gradient_to_max_only() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().leaf_with_grad(true);
    let y = x.maxpool2d().unwrap().sum();
    let g = grad(&y, &[x], false).unwrap();
    assert_eq!(g[0].data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_tie_gradient_goes_first() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 7.0, 7.0, 7.0]).unwrap().leaf_with_grad(true);
    let g = grad(&x.maxpool2d().unwrap().sum(), &[x], false).unwrap();
    assert_eq!(g[0].data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = randn(&mut rng, &[4, 6]);
    let targets = [0, 5, 2, 2];
    let p = logits.leaf_with_grad(true);
    let g = grad(&p.softmax_cross_entropy(&targets).unwrap(), &[p], false).unwrap();
    for (i, row) in logits.data().chunks(6).enumerate() {
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let onehot = if c == targets[i] { 1.0 } else { 0.0 };
            let expected = ((v - m).exp() / z - onehot) / 4.0;
            assert!((g[0].data()[i * 6 + c] - expected).abs() < 1e-12);
        }
    }
    check("cross_entropy", vec![logits], |a| a[0].softmax_cross_entropy(&targets).unwrap());
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    let pos = Tensor::new(&[3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    check("add", vec![a.clone(), b.clone()], |t| project(&t[0].add(&t[1]).unwrap(), 10));
    check("sub", vec![a.clone(), b.clone()], |t| project(&t[0].sub(&t[1]).unwrap(), 11));
    check("mul", vec![a.clone(), b.clone()], |t| project(&t[0].mul(&t[1]).unwrap(), 12));
    check("exp", vec![a.clone()], |t| project(&t[0].exp(), 13));
    check("ln", vec![pos.clone()], |t| project(&t[0].ln(), 14));
    check("powf", vec![pos], |t| project(&t[0].powf(-0.5), 15));
    check("relu", vec![a.clone()], |t| project(&t[0].relu(), 16));
    check("scale", vec![a], |t| project(&t[0].scale(-2.5).add_scalar(1.0), 17));
}

#[test]
fn reduction_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 3, 4]);
    check("sum_last", vec![x.clone()], |t| project(&t[0].sum_last(2).unwrap(), 20));
    check("sum_first", vec![x.clone()], |t| project(&t[0].sum_first().unwrap(), 21));
    check("expand_last", vec![x.clone()], |t| project(&t[0].expand_last(&[2]), 22));
    check("expand_first", vec![x.clone()], |t| project(&t[0].expand_first(3), 23));
    check("flatten", vec![x.clone()], |t| project(&t[0].flatten().unwrap(), 24));
    check("mean", vec![x], |t| t[0].mean());
    let m = randn(&mut rng, &[3, 5]);
    let n = randn(&mut rng, &[5, 2]);
    check("matmul", vec![m.clone(), n], |t| project(&t[0].matmul(&t[1]).unwrap(), 25));
    check("transpose", vec![m], |t| project(&t[0].transpose().unwrap(), 26));
}

#[test]
fn conv_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 6, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    check("conv2d", vec![x.clone(), w.clone()], |t| project(&t[0].conv2d(&t[1]).unwrap(), 30));
    check("channel_bias", vec![x.clone(), randn(&mut rng, &[3])], |t| {
        project(&t[0].add_channel_bias(&t[1]).unwrap(), 31)
    });
    check("instance_norm", vec![x.clone()], |t| {
        project(&t[0].instance_norm(INSTANCE_NORM_EPS).unwrap(), 32)
    });
    check("maxpool", vec![x.clone()], |t| project(&t[0].maxpool2d().unwrap(), 33));
    let feats = randn(&mut rng, &[2, 7]);
    let fw = randn(&mut rng, &[4, 7]);
    check("linear", vec![feats, fw, b], |t| project(&t[0].linear(&t[1], &t[2]).unwrap(), 34));
}

#[test]
fn conv_adjoint_ops_gradients() {
    // Gradients of the gradient kernels themselves, reached via create_graph.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[1, 2, 5, 4]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    check_second_order("conv2d", vec![x, w], |t| {
        project(&t[0].conv2d(&t[1]).unwrap().powf(2.0), 40)
    });
}

#[test]
fn second_order_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[2, 2, 4, 4]);
    check_second_order("instance_norm", vec![x.clone()], |t| {
        project(&t[0].instance_norm(INSTANCE_NORM_EPS).unwrap().powf(2.0), 41)
    });
    check_second_order("maxpool_relu", vec![x.clone()], |t| {
        project(&t[0].relu().maxpool2d().unwrap().exp(), 42)
    });
    let logits = randn(&mut rng, &[3, 5]);
    check_second_order("cross_entropy", vec![logits], |t| {
        t[0].softmax_cross_entropy(&[1, 4, 0]).unwrap()
    });
    let feats = randn(&mut rng, &[3, 4]);
    let w = randn(&mut rng, &[5, 4]);
    let b = randn(&mut rng, &[5]);
    check_second_order("linear_ce", vec![feats, w, b], |t| {
        t[0].linear(&t[1], &t[2]).unwrap().softmax_cross_entropy(&[0, 2, 4]).unwrap()
    });
}

#[test]
fn tiny_convnet_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[2, 1, 8, 8]);
    let inputs = vec![
        randn(&mut rng, &[3, 1, 3, 3]),
        randn(&mut rng, &[3]),
        randn(&mut rng, &[4, 3 * 4 * 4]),
        randn(&mut rng, &[4]),
    ];
    let net = move |t: &[Tensor]| {
        let h = x
            .conv2d(&t[0])
            .unwrap()
            .add_channel_bias(&t[1])
            .unwrap()
            .instance_norm(INSTANCE_NORM_EPS)
            .unwrap()
            .relu()
            .maxpool2d()
            .unwrap()
            .flatten()
            .unwrap();
        h.linear(&t[2], &t[3]).unwrap().softmax_cross_entropy(&[1, 3]).unwrap()
    };
    check("convnet", inputs.clone(), &net);
    check_second_order("convnet", inputs, &net);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[2, 5]).leaf_with_grad(true);
    let w = randn(&mut rng, &[3, 5]).leaf_with_grad(true);
    let b = randn(&mut rng, &[3]).leaf_with_grad(true);
    let logits = x.linear(&w, &b).unwrap();
    let l1 = logits.softmax_cross_entropy(&[0, 2]).unwrap();
    let l2 = logits.relu().powf(2.0).sum();
    let (ca, cb) = (0.7, -1.3);
    let combined = l1.scale(ca).add(&l2.scale(cb)).unwrap();
    let params = [x, w, b];
    let g1 = grad(&l1, &params, false).unwrap();
    let g2 = grad(&l2, &params, false).unwrap();
    let gc = grad(&combined, &params, false).unwrap();
    for k in 0..3 {
        for ((c, a), b) in gc[k].data().iter().zip(g1[k].data()).zip(g2[k].data()) {
            assert!((c - (ca * a + cb * b)).abs() < 1e-10);
        }
    }
}

#[test]
fn shared_subexpressions_match_hand_expansion() {
    // f(a, b) = sum(u * u + u * b) with u = exp(a) * b.
    let a = Tensor::new(&[3], vec![0.1, -0.4, 0.7]).unwrap().leaf_with_grad(true);
    let b = Tensor::new(&[3], vec![1.5, 0.2, -0.9]).unwrap().leaf_with_grad(true);
    let u = a.exp().mul(&b).unwrap();
    let f = u.mul(&u).unwrap().add(&u.mul(&b).unwrap()).unwrap().sum();
    let g = grad(&f, &[a.clone(), b.clone()], false).unwrap();
    for i in 0..3 {
        let (av, bv) = (a.data()[i], b.data()[i]);
        let uv = av.exp() * bv;
        // df/du = 2u + b; du/da = u; du/db = e^a; df/db (direct) = u
        let dfa = (2.0 * uv + bv) * uv;
        let dfb = (2.0 * uv + bv) * av.exp() + uv;
        assert!((g[0].data()[i] - dfa).abs() < 1e-12);
        assert!((g[1].data()[i] - dfb).abs() < 1e-12);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[2, 2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]).leaf_with_grad(true);
        let y = x.conv2d(&w).unwrap().instance_norm(INSTANCE_NORM_EPS).unwrap().relu();
        let loss = project(&y.maxpool2d().unwrap(), 50);
        let g = grad(&loss, &[w], false).unwrap();
        (loss.item().to_bits(), g[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn deep_unrolled_graph_drops_without_overflow() {
    let mut t = Tensor::scalar(1.0).leaf_with_grad(true);
    let root = t.clone();
    for _ in 0..200_000 {
        t = t.scale(1.0);
    }
    let g = grad(&t, &[root], false).unwrap();
    assert_eq!(g[0].item(), 1.0);
    drop(t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_agrees_with_brute_force(
        seed in 0u64..10_000,
        n in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 1usize..7, w in 1usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[n, ci, h, w]);
        let k = randn(&mut rng, &[co, ci, 3, 3]);
        let fast = x.conv2d(&k).unwrap();
        for (a, b) in fast.data().iter().zip(brute_conv(&x, &k)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..10_000, n in 1usize..5, c in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = randn(&mut rng, &[n, c]).scale(10.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let loss = logits.softmax_cross_entropy(&targets).unwrap().item();
        prop_assert!(loss >= -1e-12 && loss.is_finite());
    }
}
