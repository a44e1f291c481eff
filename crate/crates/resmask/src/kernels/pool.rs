//! Spatial resampling kernels: max pooling, global average pooling, and
//! nearest-neighbour upsampling to an explicit target size.

use crate::error::{Error, Result};
use crate::kernels::conv::conv_out_size;
use crate::tensor::{c, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn infer<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<PoolGeom> {
        let (batch, ch, in_h, in_w) = x.dims4()?;
        if k == 0 {
            return Err(Error::InvalidGeometry("pool kernel must be >= 1".into()));
        }
        // pad < k guarantees every window overlaps at least one real cell.
        if pad >= k {
            return Err(Error::InvalidGeometry(format!("pool pad {pad} must be < kernel {k}")));
        }
        let out_h = conv_out_size(in_h, k, stride, pad)?;
        let out_w = conv_out_size(in_w, k, stride, pad)?;
        Ok(PoolGeom { batch, ch, in_h, in_w, k, stride, pad, out_h, out_w })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.ch, self.out_h, self.out_w]
    }
}

/// Max pooling. Padding cells are *excluded* from the max (zero-padding would
/// corrupt all-negative windows); ties keep the first element in row-major
/// window order. Returns the chosen flat input index per output element so the
/// backward pass can scatter exactly.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<u32>, PoolGeom)> {
    let g = PoolGeom::infer(x, k, stride, pad)?;
    debug_assert!(x.numel() <= u32::MAX as usize, "tensor too large for u32 pool indices");
    let xd = x.data();
    let n_out = g.batch * g.ch * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for item in 0..g.batch {
        for ch in 0..g.ch {
            let base = (item * g.ch + ch) * g.in_h * g.in_w;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut best: Option<(T, usize)> = None;
                    for ki in 0..g.k {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * g.in_w + iw as usize;
                            let v = xd[idx];
                            // strict > keeps the first maximum on ties
                            match best {
                                Some((bv, _)) if v <= bv => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (v, idx) = best.expect("pad < k guarantees a non-empty window");
                    out.push(v);
                    argmax.push(idx as u32);
                }
            }
        }
    }
    Ok((Tensor::raw(g.out_shape().to_vec(), out), argmax, g))
}

/// Scatter the output gradient back to the argmax cells (accumulating, since
/// overlapping windows may pick the same input).
pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[u32], in_numel: usize, in_shape: &[usize]) -> Tensor<T> {
    debug_assert_eq!(grad_out.numel(), argmax.len());
    let mut gx = vec![T::zero(); in_numel];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gx[idx as usize] += g;
    }
    Tensor::raw(in_shape.to_vec(), gx)
}

/// Mean over the full spatial extent: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ch, h, w) = x.dims4()?;
    let m = c::<T>((h * w) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * ch);
    for plane in 0..n * ch {
        let s = &xd[plane * h * w..(plane + 1) * h * w];
        let mut acc = T::zero();
        for &v in s {
            acc += v;
        }
        out.push(acc / m);
    }
    Ok(Tensor::raw(vec![n, ch, 1, 1], out))
}

pub fn global_avgpool_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, ch, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let m = c::<T>((h * w) as f64);
    let mut gx = vec![T::zero(); n * ch * h * w];
    for plane in 0..n * ch {
        let g = grad_out.data()[plane] / m;
        for v in &mut gx[plane * h * w..(plane + 1) * h * w] {
            *v = g;
        }
    }
    Tensor::raw(in_shape.to_vec(), gx)
}

/// Nearest-neighbour upsample to an explicit target size; the source index is
/// `floor(dst * src / target)`. The target may not shrink either dimension,
/// and an equal size degenerates to a copy.
pub fn upsample_to<T: Scalar>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    let (n, ch, h, w) = x.dims4()?;
    if target_h < h || target_w < w {
        return Err(Error::InvalidGeometry(format!(
            "upsample target {target_h}x{target_w} smaller than input {h}x{w}"
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * ch * target_h * target_w);
    for plane in 0..n * ch {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for dr in 0..target_h {
            let sr = dr * h / target_h;
            let row = &src[sr * w..(sr + 1) * w];
            for dc in 0..target_w {
                out.push(row[dc * w / target_w]);
            }
        }
    }
    Ok(Tensor::raw(vec![n, ch, target_h, target_w], out))
}

pub fn upsample_to_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, ch, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, th, tw) = grad_out.dims4().expect("upsample grad is rank 4");
    let go = grad_out.data();
    let mut gx = vec![T::zero(); n * ch * h * w];
    for plane in 0..n * ch {
        let dst = &go[plane * th * tw..(plane + 1) * th * tw];
        let src = &mut gx[plane * h * w..(plane + 1) * h * w];
        let mut s = 0usize;
        for dr in 0..th {
            let sr = dr * h / th;
            for dc in 0..tw {
                src[sr * w + dc * w / tw] += dst[s];
                s += 1;
            }
        }
    }
    Tensor::raw(in_shape.to_vec(), gx)
}
