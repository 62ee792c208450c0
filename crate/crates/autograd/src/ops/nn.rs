//! Network layers composed from the primitive ops. Being compositions, they
//! are differentiable to any order without dedicated backward rules.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::{elementwise as ew, index, linalg, reduce};
use crate::tensor::Tensor;

/// Default `eps` for [`Tensor::instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl Tensor {
    /// Normalizes every `(sample, channel)` plane of `[N, C, H, W]` to zero mean
    /// and unit variance (population variance plus `eps`). No affine part.
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor> {
        let &[_, _, h, w] = self.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "instance_norm",
                msg: format!("expected [N, C, H, W], got {:?}", self.shape()),
            });
        };
        if h * w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "instance_norm",
                msg: "empty spatial extent".into(),
            });
        }
        let spatial = [h, w];
        let inv_area = 1.0 / (h * w) as f64;
        let mean = ew::scale(&reduce::sum_last(self, 2), inv_area);
        let centered = ew::sub(self, &reduce::expand_last(&mean, &spatial));
        let var = ew::scale(&reduce::sum_last(&ew::mul(&centered, &centered), 2), inv_area);
        let inv_std = ew::powf(&ew::add_scalar(&var, eps), -0.5);
        Ok(ew::mul(&centered, &reduce::expand_last(&inv_std, &spatial)))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        match (self.shape(), bias.shape()) {
            (&[n, c, h, w], &[bc]) if c == bc => {
                let planes = reduce::expand_first(&reduce::expand_last(bias, &[h, w]), n);
                Ok(ew::add(self, &planes))
            }
            (l, r) => Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    /// `x W^T + b` for `x: [N, D]`, `W: [C, D]`, `b: [C]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        match (self.shape(), weight.shape(), bias.shape()) {
            (&[n, d], &[c, wd], &[bc]) if d == wd && c == bc => {
                let xw = linalg::matmul(self, &linalg::transpose(weight));
                Ok(ew::add(&xw, &reduce::expand_first(bias, n)))
            }
            (l, r, _) => Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, with the row
    /// maximum subtracted for stability.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let &[n, c] = self.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("expected logits [N, C], got {:?}", self.shape()),
            });
        };
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&target) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::TargetOutOfRange { target, classes: c });
        }
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: "empty batch".into(),
            });
        }
        // The shift is a constant: log-sum-exp is invariant to it, so
        // treating it as detached leaves every derivative exact.
        let row_max: Vec<f64> = self
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = Tensor::leaf(vec![n], Arc::new(row_max), false);
        let z = ew::sub(self, &reduce::expand_last(&shift, &[c]));
        let lse = ew::ln(&reduce::sum_last(&ew::exp(&z), 1));
        let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
        let picked = index::gather(&z, Arc::new(picks), &[n]);
        Ok(ew::scale(&reduce::sum_last(&ew::sub(&lse, &picked), 1), 1.0 / n as f64))
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
