//! Per-channel batch normalization over NCHW activations.
//!
//! Train mode normalizes with the biased batch variance and returns the batch
//! statistics so the layer can maintain running estimates (those use the
//! unbiased variance, the convention published FER checkpoints follow). Eval
//! mode is a per-channel affine map built from the running statistics.

use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tensor};

/// Output of the training-mode forward pass. `x_hat` is retained for the
/// backward pass; `mean`/`var` (biased) feed the running-statistics update.
pub struct BnTrainOut<T> {
    pub y: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_affine<T: Scalar>(ch: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [ch] || beta.shape() != [ch] {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm affine shapes {:?}/{:?} do not match {ch} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub fn bn_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BnTrainOut<T>> {
    let (n, ch, h, w) = x.dims4()?;
    check_affine(ch, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch x spatial = {m}; need >= 2 to estimate variance in train mode"
        )));
    }
    let plane = h * w;
    let xd = x.data();
    let m_t = c::<T>(m as f64);
    let eps_t = c::<T>(eps);

    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    // two passes per channel: mean, then centered second moment
    for cc in 0..ch {
        let mut acc = T::zero();
        for item in 0..n {
            let s = ((item * ch) + cc) * plane;
            for &v in &xd[s..s + plane] {
                acc += v;
            }
        }
        mean[cc] = acc / m_t;
    }
    for cc in 0..ch {
        let mu = mean[cc];
        let mut acc = T::zero();
        for item in 0..n {
            let s = ((item * ch) + cc) * plane;
            for &v in &xd[s..s + plane] {
                let d = v - mu;
                acc += d * d;
            }
        }
        var[cc] = acc / m_t;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

    let mut x_hat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for item in 0..n {
        for cc in 0..ch {
            let s = ((item * ch) + cc) * plane;
            let (mu, is, ga, be) = (mean[cc], inv_std[cc], gamma.data()[cc], beta.data()[cc]);
            for i in s..s + plane {
                let xh = (xd[i] - mu) * is;
                x_hat[i] = xh;
                y[i] = ga * xh + be;
            }
        }
    }

    Ok(BnTrainOut {
        y: Tensor::raw(x.shape().to_vec(), y),
        x_hat: Tensor::raw(x.shape().to_vec(), x_hat),
        inv_std,
        mean,
        var,
    })
}

/// Gradients through the batch statistics:
/// dx = gamma * inv_std * (g - mean(g) - x_hat * mean(g * x_hat)),
/// dgamma = sum(g * x_hat), dbeta = sum(g), reductions per channel.
pub fn bn_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x_hat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ch, h, w) = grad_out.dims4().expect("bn grad is rank 4");
    let plane = h * w;
    let m = c::<T>((n * plane) as f64);
    let go = grad_out.data();
    let xh = x_hat.data();

    let mut sum_g = vec![T::zero(); ch];
    let mut sum_gx = vec![T::zero(); ch];
    for item in 0..n {
        for cc in 0..ch {
            let s = ((item * ch) + cc) * plane;
            let mut a = T::zero();
            let mut b = T::zero();
            for i in s..s + plane {
                a += go[i];
                b += go[i] * xh[i];
            }
            sum_g[cc] += a;
            sum_gx[cc] += b;
        }
    }

    let mut gx = vec![T::zero(); go.len()];
    for item in 0..n {
        for cc in 0..ch {
            let s = ((item * ch) + cc) * plane;
            let k = gamma.data()[cc] * inv_std[cc];
            let mg = sum_g[cc] / m;
            let mgx = sum_gx[cc] / m;
            for i in s..s + plane {
                gx[i] = k * (go[i] - mg - xh[i] * mgx);
            }
        }
    }

    (
        Tensor::raw(grad_out.shape().to_vec(), gx),
        Tensor::raw(vec![ch], sum_gx),
        Tensor::raw(vec![ch], sum_g),
    )
}

/// Eval-mode forward: y = scale: gamma/sqrt(rv+eps) * (x - rm) + beta, folded
/// into one multiply-add per element.
pub fn bn_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, ch, h, w) = x.dims4()?;
    check_affine(ch, gamma, beta)?;
    if running_mean.len() != ch || running_var.len() != ch {
        return Err(Error::ShapeMismatch(format!(
            "running stats ({}/{}) do not match {ch} channels",
            running_mean.len(),
            running_var.len()
        )));
    }
    let plane = h * w;
    let eps_t = c::<T>(eps);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for cc in 0..ch {
        let is = T::one() / (running_var[cc] + eps_t).sqrt();
        let scale = gamma.data()[cc] * is;
        let shift = beta.data()[cc] - running_mean[cc] * scale;
        for item in 0..n {
            let s = ((item * ch) + cc) * plane;
            for i in s..s + plane {
                y[i] = xd[i] * scale + shift;
            }
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), y))
}

/// Eval-mode backward. The map is affine per channel, so dx = g * scale; the
/// affine parameters still receive gradients (needed when eval-mode activations
/// are differentiated, e.g. for saliency maps).
pub fn bn_eval_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ch, h, w) = grad_out.dims4().expect("bn grad is rank 4");
    let plane = h * w;
    let eps_t = c::<T>(eps);
    let go = grad_out.data();
    let xd = x.data();
    let mut gx = vec![T::zero(); go.len()];
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for cc in 0..ch {
        let is = T::one() / (running_var[cc] + eps_t).sqrt();
        let scale = gamma.data()[cc] * is;
        let mu = running_mean[cc];
        for item in 0..n {
            let s = ((item * ch) + cc) * plane;
            for i in s..s + plane {
                gx[i] = go[i] * scale;
                dgamma[cc] += go[i] * (xd[i] - mu) * is;
                dbeta[cc] += go[i];
            }
        }
    }
    (
        Tensor::raw(grad_out.shape().to_vec(), gx),
        Tensor::raw(vec![ch], dgamma),
        Tensor::raw(vec![ch], dbeta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const EPS: f64 = 1e-5;

    #[test]
    fn train_output_has_zero_mean_unit_var_per_channel() {
        let mut rng = Rng::new(31);
        let x = Tensor::<f64>::uniform(&[4, 3, 5, 5], &mut rng, -4.0, 2.0).unwrap();
        let gamma = Tensor::<f64>::ones(&[3]).unwrap();
        let beta = Tensor::<f64>::zeros(&[3]).unwrap();
        let out = bn_train(&x, &gamma, &beta, EPS).unwrap();
        let (n, ch, h, w) = x.dims4().unwrap();
        let plane = h * w;
        for cc in 0..ch {
            let mut vals = Vec::new();
            for item in 0..n {
                let s = ((item * ch) + cc) * plane;
                vals.extend_from_slice(&out.y.data()[s..s + plane]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10, "channel {cc} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel {cc} var {v}");
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f32>::full(&[2, 1, 3, 3], 5.0).unwrap();
        let gamma = Tensor::<f32>::ones(&[1]).unwrap();
        let beta = Tensor::<f32>::zeros(&[1]).unwrap();
        let out = bn_train(&x, &gamma, &beta, EPS).unwrap();
        for &v in out.y.data() {
            assert_eq!(v, 0.0, "constant input must normalize exactly to beta");
        }
    }

    #[test]
    fn degenerate_batch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 1, 1]).unwrap();
        let gamma = Tensor::<f32>::ones(&[4]).unwrap();
        let beta = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(matches!(bn_train(&x, &gamma, &beta, EPS), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn eval_is_pure_affine() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gamma = Tensor::<f32>::full(&[1], 2.0).unwrap();
        let beta = Tensor::<f32>::full(&[1], 1.0).unwrap();
        // running stats: mean 2, var 1 -> scale = 2/sqrt(1+eps), shift = 1 - 2*scale
        let y = bn_eval(&x, &gamma, &beta, &[2.0], &[1.0], EPS).unwrap();
        let scale = 2.0 / (1.0f32 + EPS as f32).sqrt();
        for (i, &v) in y.data().iter().enumerate() {
            let want = (x.data()[i] - 2.0) * scale + 1.0;
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_same_input_twice_is_bit_identical() {
        let mut rng = Rng::new(77);
        let x = Tensor::<f32>::uniform(&[2, 3, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let gamma = Tensor::<f32>::ones(&[3]).unwrap();
        let beta = Tensor::<f32>::zeros(&[3]).unwrap();
        let a = bn_eval(&x, &gamma, &beta, &[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], EPS).unwrap();
        let b = bn_eval(&x, &gamma, &beta, &[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], EPS).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn train_backward_param_grads_reduce_correctly() {
        let mut rng = Rng::new(13);
        let x = Tensor::<f64>::uniform(&[2, 2, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let gamma = Tensor::<f64>::ones(&[2]).unwrap();
        let beta = Tensor::<f64>::zeros(&[2]).unwrap();
        let out = bn_train(&x, &gamma, &beta, EPS).unwrap();
        let go = Tensor::<f64>::ones(out.y.shape()).unwrap();
        let (_, dgamma, dbeta) = bn_train_backward(&go, &out.x_hat, &out.inv_std, &gamma);
        // dbeta = sum of ones = m per channel; dgamma = sum x_hat ~ 0
        for &v in dbeta.data() {
            assert!((v - 18.0).abs() < 1e-9);
        }
        for &v in dgamma.data() {
            assert!(v.abs() < 1e-9, "sum of x_hat should vanish, got {v}");
        }
    }
}
