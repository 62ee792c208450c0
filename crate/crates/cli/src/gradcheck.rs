//! Finite-difference checks of every differentiable op, of a whole convnet
//! and of meta-gradients through unrolled SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zaplab_autograd::{grad, Tensor, INSTANCE_NORM_EPS};
use zaplab_core::model::{ArchitectureSpec, Model};
use zaplab_core::optim::sgd_step_functional;
use zaplab_oracle::{fd_gradient, unrolled_meta_oracle, Episode, Example, FiniteDiffSpec, SoftmaxRegression};

/// Largest relative error accepted for first-order gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Largest relative error accepted for meta-gradients.
/// Finite differences at h and h/2 further apart than this straddle a kink.
const KINK_TOL: f64 = 1e-7;
const MAX_REDRAWS: usize = 10;

pub const META_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn unflat(like: &[Tensor], v: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|p| {
            let t = Tensor::new(p.shape(), v[off..off + p.numel()].to_vec()).unwrap().leaf_with_grad(true);
            off += p.numel();
            t
        })
        .collect()
}

/// Compares `grad` of `sum(build(inputs) * R)` for a fixed random `R` with
/// central differences over every input coordinate.
fn check_op(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: impl Fn(&[Tensor]) -> Tensor) -> Check {
    let inputs: Vec<Tensor> = inputs.into_iter().map(|t| t.leaf_with_grad(true)).collect();
    let probe = build(&inputs);
    let r = uniform(rng, probe.shape(), -1.0, 1.0);
    let scalar = |xs: &[Tensor]| build(xs).mul(&r).unwrap().sum();
    let analytic: Vec<f64> = grad(&scalar(&inputs), &inputs, false)
        .unwrap()
        .as_slice()
        .iter()
        .flat_map(|g| g.to_vec())
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.to_vec()).collect();
    let spec = FiniteDiffSpec::default();
    let error = match fd_gradient(|v| scalar(&unflat(&inputs, v)).item(), &flat, &spec) {
        Ok(numeric) => spec.relative_error(&analytic, &numeric),
        Err(_) => f64::NAN,
    };
    Check {
        name: name.to_string(),
        error,
        tolerance: GRAD_TOL,
    }
}

/// First- and second-order checks of every op plus a full 8-channel convnet
/// on 14 x 14 inputs.
pub fn gradient_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);

    let (a, b) = (m(rng, &[3, 4]), m(rng, &[3, 4]));
    out.push(check_op("add", rng, vec![a.clone(), b.clone()], |t| t[0].add(&t[1]).unwrap()));
    out.push(check_op("sub", rng, vec![a.clone(), b.clone()], |t| t[0].sub(&t[1]).unwrap()));
    out.push(check_op("mul", rng, vec![a.clone(), b.clone()], |t| t[0].mul(&t[1]).unwrap()));
    out.push(check_op("neg", rng, vec![a.clone()], |t| t[0].neg()));
    out.push(check_op("scale", rng, vec![a.clone()], |t| t[0].scale(-2.5)));
    out.push(check_op("add_scalar", rng, vec![a.clone()], |t| t[0].add_scalar(0.7)));
    out.push(check_op("exp", rng, vec![a.clone()], |t| t[0].exp()));
    let pos = uniform(rng, &[3, 4], 0.5, 2.0);
    out.push(check_op("ln", rng, vec![pos.clone()], |t| t[0].ln()));
    out.push(check_op("powf", rng, vec![pos], |t| t[0].powf(1.5)));
    out.push(check_op("relu", rng, vec![a.clone()], |t| t[0].relu()));
    out.push(check_op("sub_scaled", rng, vec![a.clone(), b], |t| t[0].sub_scaled(&t[1], 0.3).unwrap()));
    let c = m(rng, &[4, 2]);
    out.push(check_op("matmul", rng, vec![a.clone(), c], |t| t[0].matmul(&t[1]).unwrap()));
    out.push(check_op("transpose", rng, vec![a.clone()], |t| t[0].transpose().unwrap()));
    out.push(check_op("sum", rng, vec![a.clone()], |t| t[0].sum()));
    out.push(check_op("mean", rng, vec![a.clone()], |t| t[0].mean()));
    out.push(check_op("sum_last", rng, vec![a.clone()], |t| t[0].sum_last(1).unwrap()));
    out.push(check_op("sum_first", rng, vec![a.clone()], |t| t[0].sum_first().unwrap()));
    out.push(check_op("expand_last", rng, vec![a.clone()], |t| t[0].expand_last(&[2, 2])));
    out.push(check_op("expand_first", rng, vec![a.clone()], |t| t[0].expand_first(3)));
    out.push(check_op("reshape", rng, vec![a.clone()], |t| t[0].reshape(&[2, 6]).unwrap()));
    out.push(check_op("gather", rng, vec![a.clone()], |t| t[0].gather(vec![0, 5, 5, 11, 3], &[5]).unwrap()));

    let img = m(rng, &[2, 3, 6, 6]);
    out.push(check_op("flatten", rng, vec![img.clone()], |t| t[0].flatten().unwrap()));
    out.push(check_op("maxpool2d", rng, vec![img.clone()], |t| t[0].maxpool2d().unwrap()));
    out.push(check_op("instance_norm", rng, vec![img.clone()], |t| t[0].instance_norm(INSTANCE_NORM_EPS).unwrap()));
    let bias = m(rng, &[3]);
    out.push(check_op("add_channel_bias", rng, vec![img, bias], |t| t[0].add_channel_bias(&t[1]).unwrap()));
    let (x, k) = (m(rng, &[1, 3, 14, 14]), m(rng, &[8, 3, 3, 3]));
    out.push(check_op("conv2d", rng, vec![x, k], |t| t[0].conv2d(&t[1]).unwrap()));
    let (feat, w, bl) = (m(rng, &[4, 6]), m(rng, &[5, 6]), m(rng, &[5]));
    out.push(check_op("linear", rng, vec![feat, w, bl], |t| t[0].linear(&t[1], &t[2]).unwrap()));
    let logits = uniform(rng, &[4, 5], -3.0, 3.0);
    out.push(check_op("softmax_cross_entropy", rng, vec![logits], |t| {
        t[0].softmax_cross_entropy(&[0, 4, 2, 2]).unwrap()
    }));

    // Gradients of gradients: the backward rules of conv are themselves
    // differentiable ops (input-gradient and weight-gradient convolutions).
    let (x2, k2) = (m(rng, &[2, 2, 5, 5]), m(rng, &[3, 2, 3, 3]));
    let r2 = m(rng, &[2, 3, 5, 5]);
    out.push(check_op("conv2d (second order)", rng, vec![x2, k2], move |t| {
        let inner = t[0].conv2d(&t[1]).unwrap().mul(&r2).unwrap().sum();
        let g = grad(&inner, t, true).unwrap();
        let gx = g.as_slice()[0].mul(&g.as_slice()[0]).unwrap().sum();
        let gw = g.as_slice()[1].mul(&g.as_slice()[1]).unwrap().sum();
        gx.add(&gw).unwrap()
    }));
    let (x3, lbl) = (m(rng, &[2, 2, 4, 4]), vec![1usize, 0]);
    let (w3, b3) = (m(rng, &[2, 2 * 2 * 2]), m(rng, &[2]));
    out.push(check_op("norm-pool-linear-ce (second order)", rng, vec![x3], move |t| {
        let w = w3.leaf_with_grad(true);
        let h = t[0].instance_norm(INSTANCE_NORM_EPS).unwrap().relu().maxpool2d().unwrap().flatten().unwrap();
        let loss = h.linear(&w, &b3).unwrap().softmax_cross_entropy(&lbl).unwrap();
        let g = grad(&loss, std::slice::from_ref(&w), true).unwrap();
        g.as_slice()[0].mul(&g.as_slice()[0]).unwrap().sum()
    }));

    // Central differences across a ReLU or max-pool kink are meaningless, so
    // a draw whose difference quotients move with the step size is redrawn.
    let spec = ArchitectureSpec::gray(14, 5, 8);
    let fd = FiniteDiffSpec::default();
    let half = FiniteDiffSpec::new(fd.h / 2.0).unwrap();
    let mut error = f64::NAN;
    for _ in 0..MAX_REDRAWS {
        let model = Model::build_convnet(&spec, rng).unwrap();
        let xb = m(rng, &[2, 1, 14, 14]);
        let labels = [3usize, 1];
        let loss = model.forward(&xb).unwrap().softmax_cross_entropy(&labels).unwrap();
        let analytic: Vec<f64> = grad(&loss, model.params(), false)
            .unwrap()
            .as_slice()
            .iter()
            .flat_map(|g| g.to_vec())
            .collect();
        let theta: Vec<f64> = model.params().iter().flat_map(|p| p.to_vec()).collect();
        let f = |v: &[f64]| {
            let p = unflat(model.params(), v);
            model.forward_with(&p, &xb).unwrap().softmax_cross_entropy(&labels).unwrap().item()
        };
        let (Ok(n), Ok(n2)) = (fd_gradient(f, &theta, &fd), fd_gradient(f, &theta, &half)) else {
            break;
        };
        if fd.relative_error(&n, &n2) > KINK_TOL {
            continue;
        }
        error = fd.relative_error(&analytic, &n);
        break;
    }
    out.push(Check {
        name: "convnet forward + loss (8 channels, 14x14)".into(),
        error,
        tolerance: GRAD_TOL,
    });
    out
}

fn engine_meta_gradient(model: &Model, episode: &Episode, k: usize, eta: f64) -> Vec<f64> {
    let batch = |items: &[Example]| {
        let data = items.iter().flat_map(|e| e.x.clone()).collect();
        let x = Tensor::new(&[items.len(), items[0].x.len()], data).unwrap();
        (x, items.iter().map(|e| e.label).collect::<Vec<_>>())
    };
    let theta0 = model.params().to_vec();
    let mut theta = theta0.clone();
    for e in &episode.inner[..k] {
        let (x, y) = batch(std::slice::from_ref(e));
        let loss = model.forward_with(&theta, &x).unwrap().softmax_cross_entropy(&y).unwrap();
        let g = grad(&loss, &theta, true).unwrap();
        theta = sgd_step_functional(&theta, &g, eta).unwrap();
    }
    let (x, y) = batch(&episode.outer);
    let loss = model.forward_with(&theta, &x).unwrap().softmax_cross_entropy(&y).unwrap();
    grad(&loss, &theta0, false).unwrap().as_slice().iter().flat_map(|g| g.to_vec()).collect()
}

/// Meta-gradients through K = 1, 2, 3 functional SGD steps against the
/// unrolled finite-difference oracle and the quadratic closed form.
pub fn meta_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 1..=3usize {
        let theta0 = vec![Tensor::new(&[1], vec![2.0]).unwrap().leaf_with_grad(true)];
        let half_sq = |t: &Tensor| t.mul(t).unwrap().sum().scale(0.5);
        let mut theta = theta0.clone();
        for _ in 0..k {
            let g = grad(&half_sq(&theta[0]), &theta, true).unwrap();
            theta = sgd_step_functional(&theta, &g, 0.1).unwrap();
        }
        let g = grad(&half_sq(&theta[0]), &theta0, false).unwrap().as_slice()[0].item();
        let expected = 0.9f64.powi(2 * k as i32) * 2.0;
        out.push(Check {
            name: format!("quadratic meta-gradient K={k} (expect {expected:.6})"),
            error: (g - expected).abs() / expected,
            tolerance: 1e-12,
        });
    }
    let toy = SoftmaxRegression { inputs: 4, classes: 4 };
    let spec = FiniteDiffSpec::default();
    for k in 1..=3usize {
        let model = Model::linear(4, 4, &mut rng).unwrap();
        let class = rng.random_range(0..4);
        let mut ex = |label: usize| Example {
            x: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label,
        };
        let inner: Vec<Example> = (0..3).map(|_| ex(class)).collect();
        let mut outer = inner.clone();
        outer.extend((0..5).map(|i| ex(i % 4)));
        let episode = Episode { inner, outer };
        let theta0: Vec<f64> = model.params().iter().flat_map(|p| p.to_vec()).collect();
        let engine = engine_meta_gradient(&model, &episode, k, 0.5);
        let error = unrolled_meta_oracle(&toy, &episode, &theta0, k, 0.5, &spec)
            .map(|o| spec.relative_error(&engine, &o))
            .unwrap_or(f64::NAN);
        out.push(Check {
            name: format!("linear 20-param meta-gradient K={k} vs unrolled oracle"),
            error,
            tolerance: META_TOL,
        });
    }
    out
}
