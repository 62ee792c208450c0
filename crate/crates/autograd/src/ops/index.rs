//! Index-driven ops: gather, its adjoint scatter-add, and the ops built on a
//! fixed index map (max pooling, picking target logits).

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

struct GatherRule {
    index: Arc<Vec<usize>>,
}
impl Backward for GatherRule {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| scatter_add(grad, Arc::clone(&self.index), inputs[0].shape()))]
    }
}

struct ScatterRule {
    index: Arc<Vec<usize>>,
}
impl Backward for ScatterRule {
    fn name(&self) -> &'static str {
        "scatter_add"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| gather(grad, Arc::clone(&self.index), inputs[0].shape()))]
    }
}

/// `out[i] = x.flat[index[i]]`.
pub(crate) fn gather(x: &Tensor, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
    let d = x.data();
    let out = index.iter().map(|&i| d[i]).collect();
    Tensor::from_op(out_shape.to_vec(), out, vec![x.clone()], GatherRule { index })
}

/// Zeros of `shape` with `out.flat[index[i]] += g[i]`.
pub(crate) fn scatter_add(g: &Tensor, index: Arc<Vec<usize>>, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; shape.iter().product()];
    for (&i, &v) in index.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_op(shape.to_vec(), out, vec![g.clone()], ScatterRule { index })
}

/// Flat source index of each 2x2/stride-2 window maximum. Ties go to the
/// first maximal element in row-major window order.
fn maxpool_index(shape: &[usize], d: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                index.push(best);
            }
        }
    }
    (index, vec![n, c, oh, ow])
}

impl Tensor {
    /// Selects `self.flat[index[i]]` into a tensor of `out_shape`.
    pub fn gather(&self, index: Vec<usize>, out_shape: &[usize]) -> Result<Tensor> {
        if index.len() != out_shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                shape: out_shape.to_vec(),
                expected: out_shape.iter().product(),
                actual: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= self.numel()) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of bounds for {} elements", self.numel()),
            });
        }
        Ok(gather(self, Arc::new(index), out_shape))
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing rows or
    /// columns are dropped.
    pub fn maxpool2d(&self) -> Result<Tensor> {
        match self.shape() {
            &[_, _, h, w] if h >= 2 && w >= 2 => {
                let (index, shape) = maxpool_index(self.shape(), self.data());
                Ok(gather(self, Arc::new(index), &shape))
            }
            s => Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                msg: format!("expected [N, C, H>=2, W>=2], got {s:?}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.maxpool2d().unwrap().data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_go_first() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (index, _) = maxpool_index(x.shape(), x.data());
        assert_eq!(index, vec![0]);
    }

    #[test]
    fn maxpool_drops_odd_edge() {
        let x = Tensor::zeros(&[2, 3, 7, 5]);
        assert_eq!(x.maxpool2d().unwrap().shape(), &[2, 3, 3, 2]);
        assert!(Tensor::zeros(&[1, 1, 1, 4]).maxpool2d().is_err());
    }

    #[test]
    fn gather_bounds() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x.gather(vec![2, 0], &[2]).unwrap().data(), &[3.0, 1.0]);
        assert!(x.gather(vec![3], &[1]).is_err());
    }
}
