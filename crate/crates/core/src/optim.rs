//! SGD and Adam.
//!
//! Plain SGD comes in two forms: [`sgd_step_inplace`] overwrites parameter
//! values, while [`sgd_step_functional`] returns new graph nodes so that a
//! later loss can be differentiated back through the step.

use zaplab_autograd::{Gradients, Tensor};

use crate::error::{Error, Result};

fn check_pairs(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {i}: shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// `theta <- theta - lr * g`, replacing each parameter with a fresh leaf.
pub fn sgd_step_inplace(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        let data: Vec<f64> = p.data().iter().zip(g.data()).map(|(&x, &d)| x - lr * d).collect();
        *p = Tensor::new(p.shape(), data)?.leaf_with_grad(p.requires_grad());
    }
    Ok(())
}

/// One differentiable SGD step. `grads` must come from `grad(.., create_graph = true)`.
pub fn sgd_step_functional(params: &[Tensor], grads: &Gradients, lr: f64) -> Result<Vec<Tensor>> {
    if !grads.has_graph() {
        return Err(Error::GradsWithoutGraph);
    }
    check_pairs(params, grads.as_slice())?;
    params
        .iter()
        .zip(grads.as_slice())
        .map(|(p, g)| Ok(p.sub_scaled(g, lr)?))
        .collect()
}

/// Moment estimates for Adam with the usual coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check_pairs(params, grads)?;
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::InvalidArgument("Adam state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.to_vec();
            for (i, (x, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            *p = Tensor::new(p.shape(), data)?.leaf_with_grad(p.requires_grad());
        }
        Ok(())
    }

    /// Zeroes both moments for the given rows of a 2-d parameter (or the given
    /// entries of a 1-d one).
    pub fn reset_rows(&mut self, param_index: usize, row_len: usize, rows: &[usize]) {
        for &r in rows {
            let span = r * row_len..(r + 1) * row_len;
            self.m[param_index][span.clone()].fill(0.0);
            self.v[param_index][span].fill(0.0);
        }
    }
}
