//! 2D convolution: the shipped im2col + GEMM kernel, its gradient kernels, and
//! a deliberately simple six-loop reference used to cross-check it.
//!
//! Convention: cross-correlation (no kernel flip), zero padding, floor output
//! sizes. Both kernels accumulate each output element over (in-channel, kernel
//! row, kernel col) in ascending order and add the bias after the sum, so in
//! identical precision they agree bit-for-bit, not just approximately.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Everything needed to run a convolution or reconstruct its gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// floor((size + 2*pad - k) / stride) + 1, or an error when the kernel
/// overhangs the padded input.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::InvalidGeometry(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn infer<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let (batch, in_ch, in_h, in_w) = x.dims4()?;
        let (out_ch, w_in_ch, kh, kw) = w.dims4()?;
        if w_in_ch != in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv weight expects {w_in_ch} input channels, input has {in_ch}"
            )));
        }
        let out_h = conv_out_size(in_h, kh, stride, pad)?;
        let out_w = conv_out_size(in_w, kw, stride, pad)?;
        Ok(ConvGeom { batch, in_ch, in_h, in_w, out_ch, kh, kw, stride, pad, out_h, out_w })
    }

    /// Rows of the patch matrix: one per (in-channel, kernel row, kernel col).
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Columns of the patch matrix: one per output pixel.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, out_ch: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias shape {:?} does not match {out_ch} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Unfold one input item `[C, H, W]` into the patch matrix
/// `[C*kh*kw, out_h*out_w]`. Out-of-bounds (padding) cells become zero.
pub fn im2col<T: Scalar>(item: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(item.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0usize;
    for ic in 0..g.in_ch {
        let plane = &item[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let mut s = 0usize;
                for oh in 0..g.out_h {
                    // signed math: padding can push source coords below zero
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        for _ in 0..g.out_w {
                            dst[s] = T::zero();
                            s += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[s] = if iw < 0 || iw >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                        s += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input item (scatter-add).
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, item: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0usize;
    for ic in 0..g.in_ch {
        let base = ic * g.in_h * g.in_w;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                let mut s = 0usize;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        s += g.out_w;
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            item[base + ih as usize * g.in_w + iw as usize] += src[s];
                        }
                        s += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[k x n].
///
/// The k loop is outermost over the accumulation so every output element sees
/// its terms in ascending-k order — that is what makes the im2col path agree
/// bit-for-bit with the naive reference.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m x k] += a[m x n] * b^T where b is [k x n] (dot of row pairs).
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for r in 0..k {
            let b_row = &b[r * n..(r + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out[i * k + r] += acc;
        }
    }
}

/// out[k x n] += a^T * b where a is [m x k], b is [m x n].
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for mm in 0..m {
        let a_row = &a[mm * k..(mm + 1) * k];
        let b_row = &b[mm * n..(mm + 1) * n];
        for (r, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

/// Shipped forward kernel: per batch item, unfold patches and multiply by the
/// `[out_ch, in_ch*kh*kw]` weight matrix, then add the bias.
pub fn conv2d_im2col<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::infer(x, w, stride, pad)?;
    check_bias(bias, g.out_ch)?;
    let k = g.col_rows();
    let n = g.col_cols();
    let mut col = vec![T::zero(); k * n];
    let mut out = vec![T::zero(); g.batch * g.out_ch * n];
    let item_len = g.in_ch * g.in_h * g.in_w;
    for item in 0..g.batch {
        im2col(&x.data()[item * item_len..(item + 1) * item_len], &g, &mut col);
        let o = &mut out[item * g.out_ch * n..(item + 1) * g.out_ch * n];
        gemm_acc(g.out_ch, k, n, w.data(), &col, o);
        if let Some(b) = bias {
            for oc in 0..g.out_ch {
                let bv = b.data()[oc];
                for v in &mut o[oc * n..(oc + 1) * n] {
                    *v += bv;
                }
            }
        }
    }
    Ok((Tensor::raw(g.out_shape().to_vec(), out), g))
}

/// Reference forward: six explicit loops, no patch matrix. Kept slow and
/// obvious on purpose; the tests require `conv2d_im2col` to reproduce it
/// bit-for-bit in identical precision.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::infer(x, w, stride, pad)?;
    check_bias(bias, g.out_ch)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.batch * g.out_ch * g.out_h * g.out_w];
    let mut o = 0usize;
    for item in 0..g.batch {
        for oc in 0..g.out_ch {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = T::zero();
                    for ic in 0..g.in_ch {
                        for ki in 0..g.kh {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.in_w as isize {
                                    continue;
                                }
                                let xi = ((item * g.in_ch + ic) * g.in_h + ih as usize) * g.in_w
                                    + iw as usize;
                                let wi = ((oc * g.in_ch + ic) * g.kh + ki) * g.kw + kj;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[oc];
                    }
                    out[o] = acc;
                    o += 1;
                }
            }
        }
    }
    Ok(Tensor::raw(g.out_shape().to_vec(), out))
}

/// Gradients of the convolution w.r.t. input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    want_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let k = g.col_rows();
    let n = g.col_cols();
    let item_len = g.in_ch * g.in_h * g.in_w;
    let go = grad_out.data();

    let mut grad_x = vec![T::zero(); x.numel()];
    let mut grad_w = vec![T::zero(); w.numel()];
    let mut col = vec![T::zero(); k * n];
    let mut grad_col = vec![T::zero(); k * n];

    for item in 0..g.batch {
        let g_item = &go[item * g.out_ch * n..(item + 1) * g.out_ch * n];

        // dW += dOut * col^T
        im2col(&x.data()[item * item_len..(item + 1) * item_len], g, &mut col);
        gemm_nt_acc(g.out_ch, n, k, g_item, &col, &mut grad_w);

        // dCol = W^T * dOut, folded back onto dX
        grad_col.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn_acc(g.out_ch, k, n, w.data(), g_item, &mut grad_col);
        col2im_add(&grad_col, g, &mut grad_x[item * item_len..(item + 1) * item_len]);
    }

    let grad_b = want_bias.then(|| {
        let mut gb = vec![T::zero(); g.out_ch];
        for item in 0..g.batch {
            for oc in 0..g.out_ch {
                let s = (item * g.out_ch + oc) * n;
                for j in 0..n {
                    gb[oc] += go[s + j];
                }
            }
        }
        Tensor::raw(vec![g.out_ch], gb)
    });

    (
        Tensor::raw(x.shape().to_vec(), grad_x),
        Tensor::raw(w.shape().to_vec(), grad_w),
        grad_b,
    )
}
