//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of the same differentiable ops as
//! the forward pass, so calling [`grad`] with `create_graph = true` yields
//! gradients that are graph nodes themselves. Differentiating a loss through
//! a sequence of such gradient steps (an unrolled optimizer) is then just
//! another call to [`grad`].
//!
//! ```
//! use zaplab_autograd::{grad, Tensor};
//!
//! let theta = Tensor::new(&[2], vec![1.0, -2.0]).unwrap().leaf_with_grad(true);
//! let loss = theta.mul(&theta).unwrap().sum();
//! let g = grad(&loss, &[theta], false).unwrap();
//! assert_eq!(g[0].data(), &[2.0, -4.0]);
//! ```

mod backward;
mod error;
mod ops;
mod tensor;

pub use backward::{grad, Gradients};
pub use error::{Result, TensorError};
pub use ops::nn::{argmax_rows, INSTANCE_NORM_EPS};
pub use tensor::{is_grad_enabled, no_grad, with_grad_mode, Tensor};
