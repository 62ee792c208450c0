use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

struct AddRule;
impl Backward for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

struct SubRule;
impl Backward for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| neg(grad))]
    }
}

struct MulRule;
impl Backward for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| mul(grad, &inputs[1])),
            needs[1].then(|| mul(grad, &inputs[0])),
        ]
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| scale(grad, self.0))]
    }
}

struct ShiftRule;
impl Backward for ShiftRule {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone())]
    }
}

struct ExpRule;
impl Backward for ExpRule {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| mul(grad, &exp(&inputs[0])))]
    }
}

struct LnRule;
impl Backward for LnRule {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| mul(grad, &powf(&inputs[0], -1.0)))]
    }
}

struct PowRule(f64);
impl Backward for PowRule {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let p = self.0;
        vec![needs[0].then(|| scale(&mul(grad, &powf(&inputs[0], p - 1.0)), p))]
    }
}

// The mask is piecewise constant, so multiplying by it is exact to every order.
struct ReluRule;
impl Backward for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let x = &inputs[0];
            let mask = map(x, |v| if v > 0.0 { 1.0 } else { 0.0 });
            let mask = Tensor::leaf(x.shape().to_vec(), Arc::new(mask), false);
            mul(grad, &mask)
        })]
    }
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), zip_map(a, b, |x, y| x + y), vec![a.clone(), b.clone()], AddRule)
}

pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), zip_map(a, b, |x, y| x - y), vec![a.clone(), b.clone()], SubRule)
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), zip_map(a, b, |x, y| x * y), vec![a.clone(), b.clone()], MulRule)
}

pub(crate) fn neg(a: &Tensor) -> Tensor {
    scale(a, -1.0)
}

pub(crate) fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, |x| x * c), vec![a.clone()], ScaleRule(c))
}

pub(crate) fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, |x| x + c), vec![a.clone()], ShiftRule)
}

pub(crate) fn exp(a: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, f64::exp), vec![a.clone()], ExpRule)
}

pub(crate) fn ln(a: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, f64::ln), vec![a.clone()], LnRule)
}

pub(crate) fn powf(a: &Tensor, p: f64) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, |x| x.powf(p)), vec![a.clone()], PowRule(p))
}

pub(crate) fn relu(a: &Tensor) -> Tensor {
    Tensor::from_op(a.shape().to_vec(), map(a, |x| x.max(0.0)), vec![a.clone()], ReluRule)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        Ok(add(self, other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        Ok(sub(self, other))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        Ok(mul(self, other))
    }

    pub fn neg(&self) -> Tensor {
        neg(self)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        scale(self, c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        add_scalar(self, c)
    }

    pub fn exp(&self) -> Tensor {
        exp(self)
    }

    pub fn ln(&self) -> Tensor {
        ln(self)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        powf(self, p)
    }

    pub fn relu(&self) -> Tensor {
        relu(self)
    }

    /// `self - lr * other`, the shape of an SGD update.
    pub fn sub_scaled(&self, other: &Tensor, lr: f64) -> Result<Tensor> {
        check_same("sub_scaled", self, other)?;
        Ok(sub(self, &scale(other, lr)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(t(&[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let err = t(&[1.0, 2.0]).add(&t(&[1.0])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn arithmetic() {
        let a = t(&[1.0, -2.0]);
        let b = t(&[0.5, 0.5]);
        assert_eq!(a.sub_scaled(&b, 0.1).unwrap().data(), &[0.95, -2.05]);
        assert_eq!(a.mul(&b).unwrap().data(), &[0.5, -1.0]);
        assert_eq!(a.powf(2.0).data(), &[1.0, 4.0]);
    }

    #[test]
    fn no_recording_without_grad_inputs() {
        let a = t(&[1.0, 2.0]);
        let out = a.exp();
        assert!(out.is_leaf());
        let p = a.leaf_with_grad(true);
        assert_eq!(p.exp().op_name(), Some("exp"));
        assert!(crate::no_grad(|| p.exp()).is_leaf());
    }
}
