use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

struct MatmulRule;
impl Backward for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| matmul(grad, &transpose(b))),
            needs[1].then(|| matmul(&transpose(a), grad)),
        ]
    }
}

struct TransposeRule;
impl Backward for TransposeRule {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| transpose(grad))]
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], MatmulRule)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_op(vec![n, m], out, vec![a.clone()], TransposeRule)
}

impl Tensor {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape(), other.shape()) {
            ([_, k1], [k2, _]) if k1 == k2 => Ok(matmul(self, other)),
            (l, r) => Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", self.shape()),
            });
        }
        Ok(transpose(self))
    }
}
