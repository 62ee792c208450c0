//! Independent reference implementations for testing.
//!
//! Nothing here calls into the production crates: every routine works on
//! plain `f64` slices with straightforward loops, so agreement with the
//! engine is evidence rather than tautology.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("non-finite function value at coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Central differences with step `h`; errors are judged relative to the
/// larger norm, never below `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub h: f64,
    pub floor: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec { h: 1e-5, floor: 1e-8 }
    }
}

impl FiniteDiffSpec {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(OracleError::BadStep(h));
        }
        Ok(FiniteDiffSpec { h, ..Default::default() })
    }

    /// `|a - b| / max(|a|, |b|, floor)` with Euclidean norms.
    pub fn relative_error(&self, a: &[f64], b: &[f64]) -> f64 {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
        let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(self.floor);
        diff / scale
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>> {
    if !(spec.h > 0.0 && spec.h.is_finite()) {
        return Err(OracleError::BadStep(spec.h));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + spec.h;
        let hi = f(&p);
        p[i] = orig - spec.h;
        let lo = f(&p);
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(OracleError::NonFinite { coord: i });
        }
        out.push((hi - lo) / (2.0 * spec.h));
    }
    Ok(out)
}

/// One labelled example for a toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Tiny differentiable model with a hand-written gradient.
pub trait ToyModel {
    fn num_params(&self) -> usize;
    /// Mean loss over `batch`.
    fn loss(&self, theta: &[f64], batch: &[Example]) -> f64;
    fn gradient(&self, theta: &[f64], batch: &[Example]) -> Vec<f64>;
}

/// `L(θ) = ½ Σ θᵢ²`, ignoring the data.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub dim: usize,
}

impl ToyModel for Quadratic {
    fn num_params(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64], _: &[Example]) -> f64 {
        0.5 * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64], _: &[Example]) -> Vec<f64> {
        theta.to_vec()
    }
}

/// Softmax regression with parameters laid out as `[W (classes x inputs), b]`
/// and mean cross-entropy loss.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxRegression {
    pub inputs: usize,
    pub classes: usize,
}

impl SoftmaxRegression {
    fn probs(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(self.classes * self.inputs);
        let mut z: Vec<f64> = (0..self.classes)
            .map(|c| b[c] + (0..self.inputs).map(|i| w[c * self.inputs + i] * x[i]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut z {
            *v = (*v - m).exp();
            total += *v;
        }
        z.iter().map(|v| v / total).collect()
    }
}

impl ToyModel for SoftmaxRegression {
    fn num_params(&self) -> usize {
        self.classes * (self.inputs + 1)
    }

    fn loss(&self, theta: &[f64], batch: &[Example]) -> f64 {
        let sum: f64 = batch.iter().map(|e| -self.probs(theta, &e.x)[e.label].ln()).sum();
        sum / batch.len() as f64
    }

    fn gradient(&self, theta: &[f64], batch: &[Example]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        let wlen = self.classes * self.inputs;
        for e in batch {
            let p = self.probs(theta, &e.x);
            for c in 0..self.classes {
                let d = (p[c] - if c == e.label { 1.0 } else { 0.0 }) / batch.len() as f64;
                for i in 0..self.inputs {
                    g[c * self.inputs + i] += d * e.x[i];
                }
                g[wlen + c] += d;
            }
        }
        g
    }
}

/// Data of one alternating episode: the single-class inner examples, one per
/// SGD step, and the batch the outer loss is taken on.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub inner: Vec<Example>,
    pub outer: Vec<Example>,
}

pub const META_ORACLE_MAX_PARAMS: usize = 200;
pub const META_ORACLE_MAX_STEPS: usize = 3;

/// Runs `k` single-example SGD steps from `theta0`, then returns the outer loss.
pub fn unrolled_outer_loss<M: ToyModel>(model: &M, episode: &Episode, k: usize, eta_in: f64, theta0: &[f64]) -> f64 {
    let mut theta = theta0.to_vec();
    for e in &episode.inner[..k] {
        let g = model.gradient(&theta, std::slice::from_ref(e));
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= eta_in * gi;
        }
    }
    model.loss(&theta, &episode.outer)
}

/// Gradient of the outer loss with respect to the pre-inner-loop parameters,
/// by finite differences through the whole unrolled pipeline.
pub fn unrolled_meta_oracle<M: ToyModel>(
    model: &M,
    episode: &Episode,
    theta0: &[f64],
    k: usize,
    eta_in: f64,
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    if model.num_params() > META_ORACLE_MAX_PARAMS || theta0.len() != model.num_params() {
        return Err(OracleError::Invalid(format!(
            "toy model needs 1..={META_ORACLE_MAX_PARAMS} parameters matching theta0"
        )));
    }
    if k > META_ORACLE_MAX_STEPS || k > episode.inner.len() {
        return Err(OracleError::Invalid(format!(
            "k = {k} exceeds the limit of {META_ORACLE_MAX_STEPS} or the inner examples"
        )));
    }
    fd_gradient(|t| unrolled_outer_loss(model, episode, k, eta_in, t), theta0, spec)
}

/// Stride-1 cross-correlation with zero "same" padding.
///
/// `x` is `[n, c_in, h, w]`, `weight` is `[c_out, c_in, k, k]` with odd `k`;
/// the result is `[n, c_out, h, w]`.
pub fn brute_conv(x: &[f64], dims: [usize; 4], weight: &[f64], c_out: usize, k: usize) -> Result<Vec<f64>> {
    let [n, c_in, h, w] = dims;
    if k.is_multiple_of(2) || x.len() != n * c_in * h * w || weight.len() != c_out * c_in * k * k {
        return Err(OracleError::Invalid("brute_conv: inconsistent shapes".into()));
    }
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c_out * h * w];
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + c) * h + y as usize) * w + xx as usize];
                                acc += weight[((o * c_in + c) * k + di) * k + dj] * xv;
                            }
                        }
                    }
                    out[((b * c_out + o) * h + i) * w + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Textbook bias-corrected Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct ReferenceAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ReferenceAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        ReferenceAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t));
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
