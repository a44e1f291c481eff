//! Row-wise softmax and the softmax cross-entropy loss.
//!
//! Both go through log-sum-exp so finite logits can never produce a
//! non-finite loss, no matter how skewed the row is.

use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tensor};

/// Stabilized softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax_rows(logits)?.map(|lp| lp.exp()))
}

/// log softmax over rows: x - max - ln(sum exp(x - max)).
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = logits.dims2()?;
    logits.ensure_finite("logits")?;
    let xd = logits.data();
    let mut out = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - mx).exp();
        }
        let log_denom = denom.ln();
        for (j, &v) in row.iter().enumerate() {
            out[r * cols + j] = v - mx - log_denom;
        }
    }
    Ok(Tensor::raw(logits.shape().to_vec(), out))
}

/// Mean negative log-likelihood of the true labels; also returns the softmax
/// probabilities (needed by the gradient and by callers reporting them).
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (rows, cols) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidShape("cross entropy over an empty batch".into()));
    }
    for &l in labels {
        if l >= cols {
            return Err(Error::LabelOutOfRange { got: l, max: cols - 1 });
        }
    }
    let logp = log_softmax_rows(logits)?;
    let mut loss = T::zero();
    for (r, &l) in labels.iter().enumerate() {
        loss -= logp.data()[r * cols + l];
    }
    loss = loss / c::<T>(rows as f64);
    Ok((loss, logp.map(|v| v.exp())))
}

/// d(loss)/d(logits) = (softmax - onehot) / batch.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (rows, cols) = probs.dims2().expect("probs are rank 2");
    let inv_n = upstream / c::<T>(rows as f64);
    let mut g = probs.data().to_vec();
    for (r, &l) in labels.iter().enumerate() {
        g[r * cols + l] -= T::one();
    }
    for v in &mut g {
        *v *= inv_n;
    }
    Tensor::raw(probs.shape().to_vec(), g)
}
