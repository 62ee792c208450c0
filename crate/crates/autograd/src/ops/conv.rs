//! Stride-1 "same" 2-d convolution (odd square kernels, zero padding `k / 2`).
//!
//! The forward conv, its input-gradient and its weight-gradient are three
//! views of one trilinear form `<conv(x, w), g>`, so the vector-Jacobian
//! product of each is expressed with the other two. That closure is what makes
//! gradients-of-gradients through conv layers work.

use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Output rows `i` that read input row `i + ki - pad`, and the same for columns.
    fn valid(&self, extent: usize, ki: usize) -> std::ops::Range<usize> {
        let p = self.pad();
        let lo = p.saturating_sub(ki);
        let hi = (extent + p).saturating_sub(ki).min(extent);
        lo..hi.max(lo)
    }
}

fn geom_of(x_shape: &[usize], w_shape: &[usize]) -> Geom {
    Geom {
        n: x_shape[0],
        c_in: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        c_out: w_shape[0],
        k: w_shape[2],
    }
}

/// Unfolds one `[C_in, H, W]` image into `[C_in * k * k, H * W]` patch columns.
/// Padding positions are never written, so `cols` must start zeroed and can be
/// reused across images of the same geometry.
#[inline(always)]
fn im2col(g: Geom, x: &[f64], cols: &mut [f64]) {
    let (hw, p) = (g.h * g.w, g.pad());
    for ci in 0..g.c_in {
        let xp = &x[ci * hw..][..hw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((ci * g.k + ki) * g.k + kj) * hw..][..hw];
                let jr = g.valid(g.w, kj);
                for i in g.valid(g.h, ki) {
                    let r = i + ki - p;
                    let dst = &mut row[i * g.w..][..g.w];
                    let src = &xp[r * g.w..][..g.w];
                    dst[jr.clone()].copy_from_slice(&src[jr.start + kj - p..jr.end + kj - p]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
#[inline(always)]
fn col2im(g: Geom, cols: &[f64], dx: &mut [f64]) {
    let (hw, p) = (g.h * g.w, g.pad());
    for ci in 0..g.c_in {
        let dp = &mut dx[ci * hw..][..hw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((ci * g.k + ki) * g.k + kj) * hw..][..hw];
                let jr = g.valid(g.w, kj);
                for i in g.valid(g.h, ki) {
                    let r = i + ki - p;
                    let src = &row[i * g.w..][..g.w];
                    let dst = &mut dp[r * g.w..][..g.w];
                    for (d, s) in dst[jr.start + kj - p..jr.end + kj - p].iter_mut().zip(&src[jr.clone()]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out += sum_t a[t] * rows[t]`, taking up to four rows per pass over `out`.
/// Each element sees the terms in order, left to right.
#[inline(always)]
fn accumulate(out: &mut [f64], a: &[f64], row: impl Fn(usize) -> usize, src: &[f64]) {
    let n = out.len();
    let mut t = 0;
    while t + 4 <= a.len() {
        let (a0, a1, a2, a3) = (a[t], a[t + 1], a[t + 2], a[t + 3]);
        let r0 = &src[row(t)..][..n];
        let r1 = &src[row(t + 1)..][..n];
        let r2 = &src[row(t + 2)..][..n];
        let r3 = &src[row(t + 3)..][..n];
        for j in 0..n {
            out[j] = out[j] + a0 * r0[j] + a1 * r1[j] + a2 * r2[j] + a3 * r3[j];
        }
        t += 4;
    }
    while t < a.len() {
        let at = a[t];
        let r = &src[row(t)..][..n];
        for j in 0..n {
            out[j] += at * r[j];
        }
        t += 1;
    }
}

#[inline(always)]
fn forward_generic(g: Geom, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let (hw, r) = (g.h * g.w, g.c_in * g.k * g.k);
    let mut y = vec![0.0; g.n * g.c_out * hw];
    let mut cols = vec![0.0; r * hw];
    for n in 0..g.n {
        im2col(g, &x[n * g.c_in * hw..][..g.c_in * hw], &mut cols);
        let yn = &mut y[n * g.c_out * hw..][..g.c_out * hw];
        for co in 0..g.c_out {
            accumulate(&mut yn[co * hw..][..hw], &wt[co * r..][..r], |q| q * hw, &cols);
        }
    }
    y
}

#[inline(always)]
fn input_grad_generic(g: Geom, gy: &[f64], wt: &[f64]) -> Vec<f64> {
    let (hw, r) = (g.h * g.w, g.c_in * g.k * g.k);
    let mut dx = vec![0.0; g.n * g.c_in * hw];
    let mut dcols = vec![0.0; r * hw];
    // Column q of the weight matrix, gathered once.
    let wcols: Vec<Vec<f64>> = (0..r).map(|q| (0..g.c_out).map(|co| wt[co * r + q]).collect()).collect();
    for n in 0..g.n {
        let gn = &gy[n * g.c_out * hw..][..g.c_out * hw];
        for (q, wq) in wcols.iter().enumerate() {
            let row = &mut dcols[q * hw..][..hw];
            row.fill(0.0);
            accumulate(row, wq, |co| co * hw, gn);
        }
        col2im(g, &dcols, &mut dx[n * g.c_in * hw..][..g.c_in * hw]);
    }
    dx
}

#[inline(always)]
fn weight_grad_generic(g: Geom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (hw, r) = (g.h * g.w, g.c_in * g.k * g.k);
    let mut dw = vec![0.0; g.c_out * r];
    let mut cols = vec![0.0; r * hw];
    // Patches as rows: `cols_t[j * r + q] = cols[q * hw + j]`.
    let mut cols_t = vec![0.0; hw * r];
    for n in 0..g.n {
        im2col(g, &x[n * g.c_in * hw..][..g.c_in * hw], &mut cols);
        for (q, row) in cols.chunks_exact(hw).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cols_t[j * r + q] = v;
            }
        }
        let gn = &gy[n * g.c_out * hw..][..g.c_out * hw];
        for co in 0..g.c_out {
            accumulate(&mut dw[co * r..][..r], &gn[co * hw..][..hw], |j| j * r, &cols_t);
        }
    }
    dw
}

/// Defines a kernel entry point that runs an AVX2 build of `$generic` when
/// the CPU has it. Both builds perform the same operations in the same order.
macro_rules! dispatch {
    ($name:ident, $avx:ident, $generic:ident, $a:ident, $b:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx(g: Geom, $a: &[f64], $b: &[f64]) -> Vec<f64> {
            $generic(g, $a, $b)
        }

        fn $name(g: Geom, $a: &[f64], $b: &[f64]) -> Vec<f64> {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                return unsafe { $avx(g, $a, $b) };
            }
            $generic(g, $a, $b)
        }
    };
}

dispatch!(forward_kernel, forward_avx2, forward_generic, x, wt);
dispatch!(input_grad_kernel, input_grad_avx2, input_grad_generic, gy, wt);
dispatch!(weight_grad_kernel, weight_grad_avx2, weight_grad_generic, x, gy);

struct ConvRule;
impl Backward for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| conv_input_grad(grad, w, x.shape())),
            needs[1].then(|| conv_weight_grad(x, grad, w.shape())),
        ]
    }
}

struct ConvInputGradRule;
impl Backward for ConvInputGradRule {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| conv(grad, w)),
            needs[1].then(|| conv_weight_grad(grad, gy, w.shape())),
        ]
    }
}

struct ConvWeightGradRule;
impl Backward for ConvWeightGradRule {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| conv_input_grad(gy, grad, x.shape())),
            needs[1].then(|| conv(x, grad)),
        ]
    }
}

pub(crate) fn conv(x: &Tensor, w: &Tensor) -> Tensor {
    let g = geom_of(x.shape(), w.shape());
    let y = forward_kernel(g, x.data(), w.data());
    Tensor::from_op(vec![g.n, g.c_out, g.h, g.w], y, vec![x.clone(), w.clone()], ConvRule)
}

pub(crate) fn conv_input_grad(gy: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let g = geom_of(x_shape, w.shape());
    let dx = input_grad_kernel(g, gy.data(), w.data());
    Tensor::from_op(x_shape.to_vec(), dx, vec![gy.clone(), w.clone()], ConvInputGradRule)
}

pub(crate) fn conv_weight_grad(x: &Tensor, gy: &Tensor, w_shape: &[usize]) -> Tensor {
    let g = geom_of(x.shape(), w_shape);
    let dw = weight_grad_kernel(g, x.data(), gy.data());
    Tensor::from_op(w_shape.to_vec(), dw, vec![x.clone(), gy.clone()], ConvWeightGradRule)
}

impl Tensor {
    /// `[N, C_in, H, W] * [C_out, C_in, k, k] -> [N, C_out, H, W]`, stride 1,
    /// zero padding `k / 2`, `k` odd.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        };
        let (&[_, c_in, _, _], &[_, kc_in, kh, kw]) = (self.shape(), kernel.shape()) else {
            return Err(mismatch());
        };
        if c_in != kc_in {
            return Err(mismatch());
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be square with odd size, got {kh}x{kw}"),
            });
        }
        Ok(conv(self, kernel))
    }
}
