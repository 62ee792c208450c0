//! Reductions, broadcasts and pure layout ops. Each reduction is paired with
//! the broadcast that is its adjoint, so both are differentiable to any order.

use crate::error::{Result, TensorError};
use crate::tensor::{numel_of, Backward, Tensor};

struct SumLastRule {
    trailing: Vec<usize>,
}
impl Backward for SumLastRule {
    fn name(&self) -> &'static str {
        "sum_last"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| expand_last(grad, &self.trailing))]
    }
}

struct ExpandLastRule {
    axes: usize,
}
impl Backward for ExpandLastRule {
    fn name(&self) -> &'static str {
        "expand_last"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| sum_last(grad, self.axes))]
    }
}

struct SumFirstRule {
    n: usize,
}
impl Backward for SumFirstRule {
    fn name(&self) -> &'static str {
        "sum_first"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| expand_first(grad, self.n))]
    }
}

struct ExpandFirstRule;
impl Backward for ExpandFirstRule {
    fn name(&self) -> &'static str {
        "expand_first"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| sum_first(grad))]
    }
}

struct ReshapeRule;
impl Backward for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| reshape(grad, inputs[0].shape()))]
    }
}

/// Sums over the trailing `axes` dimensions.
pub(crate) fn sum_last(x: &Tensor, axes: usize) -> Tensor {
    let split = x.ndim() - axes;
    let trailing = x.shape()[split..].to_vec();
    let inner = numel_of(&trailing);
    let out_shape = x.shape()[..split].to_vec();
    let data: Vec<f64> = if inner == 0 {
        vec![0.0; numel_of(&out_shape)]
    } else {
        x.data().chunks_exact(inner).map(|c| c.iter().sum()).collect()
    };
    Tensor::from_op(out_shape, data, vec![x.clone()], SumLastRule { trailing })
}

/// Repeats every element `numel(trailing)` times, appending `trailing` to the shape.
pub(crate) fn expand_last(x: &Tensor, trailing: &[usize]) -> Tensor {
    let inner = numel_of(trailing);
    let mut shape = x.shape().to_vec();
    shape.extend_from_slice(trailing);
    let mut data = Vec::with_capacity(x.numel() * inner);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, inner));
    }
    Tensor::from_op(shape, data, vec![x.clone()], ExpandLastRule { axes: trailing.len() })
}

/// Sums over the leading dimension.
pub(crate) fn sum_first(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let out_shape = x.shape()[1..].to_vec();
    let inner = numel_of(&out_shape);
    let mut data = vec![0.0; inner];
    for row in x.data().chunks_exact(inner.max(1)).take(n) {
        for (acc, &v) in data.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::from_op(out_shape, data, vec![x.clone()], SumFirstRule { n })
}

/// Stacks `n` copies along a new leading dimension.
pub(crate) fn expand_first(x: &Tensor, n: usize) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n * x.numel());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::from_op(shape, data, vec![x.clone()], ExpandFirstRule)
}

pub(crate) fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    Tensor::from_op(shape.to_vec(), x.to_vec(), vec![x.clone()], ReshapeRule)
}

impl Tensor {
    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        sum_last(self, self.ndim())
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_last(&self, axes: usize) -> Result<Tensor> {
        if axes > self.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "sum_last",
                msg: format!("cannot reduce {axes} axes of a {}-d tensor", self.ndim()),
            });
        }
        Ok(sum_last(self, axes))
    }

    pub fn expand_last(&self, trailing: &[usize]) -> Tensor {
        expand_last(self, trailing)
    }

    pub fn sum_first(&self) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "sum_first",
                msg: "0-d tensor has no leading axis".into(),
            });
        }
        Ok(sum_first(self))
    }

    pub fn expand_first(&self, n: usize) -> Tensor {
        expand_first(self, n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(reshape(self, shape))
    }

    /// Collapses every dimension after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&self) -> Result<Tensor> {
        match self.shape() {
            [] => Err(TensorError::InvalidArgument {
                op: "flatten",
                msg: "0-d tensor".into(),
            }),
            [n, rest @ ..] => {
                let cols = numel_of(rest);
                Ok(reshape(self, &[*n, cols]))
            }
        }
    }
}
