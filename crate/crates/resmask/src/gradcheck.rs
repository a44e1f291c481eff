//! Finite-difference gradient checking.
//!
//! Treats the tape as a black box: evaluates the same function twice per probed
//! element with nudged inputs and compares the slope against the gradient the
//! backward sweep produced. The two computations share no code path beyond the
//! forward kernels themselves.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Value};
use crate::tensor::{c, Scalar, Tensor};

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    /// (f(x+h) - f(x-h)) / 2h — second-order accurate, the default.
    Central,
    /// (f(x+h) - f(x)) / h — for functions with kinks right at x-h.
    Forward,
}

/// Relative error between an analytic and a numeric derivative:
/// |a - n| / max(1e-8, |a| + |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn eval_scalar<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Value<T>]) -> Result<Value<T>>,
{
    let mut tape = Tape::no_grad();
    let vals: Vec<Value<T>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(false)))
        .collect();
    let out = f(&mut tape, &vals)?;
    if out.data().numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got output shape {:?}",
            out.shape()
        )));
    }
    Ok(out.data().data()[0].to_f64())
}

fn analytic_grads<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Value<T>]) -> Result<Value<T>>,
{
    let mut tape = Tape::recording();
    let vals: Vec<Value<T>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vals)?;
    if out.data().numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got output shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(&out)?;
    vals.iter()
        .map(|v| {
            grads
                .wrt(v)
                .cloned()
                .ok_or_else(|| Error::Contract("input missing from gradient set".into()))
        })
        .collect()
}

fn numeric_grad_element<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    which: usize,
    elem: usize,
    h: f64,
    mode: DiffMode,
    base: f64,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Value<T>]) -> Result<Value<T>>,
{
    let mut bumped: Vec<Tensor<T>> = inputs.to_vec();
    let orig = bumped[which].data()[elem].to_f64();
    bumped[which].data_mut()[elem] = c(orig + h);
    let plus = eval_scalar(f, &bumped)?;
    Ok(match mode {
        DiffMode::Central => {
            bumped[which].data_mut()[elem] = c(orig - h);
            let minus = eval_scalar(f, &bumped)?;
            (plus - minus) / (2.0 * h)
        }
        DiffMode::Forward => (plus - base) / h,
    })
}

/// Check the gradient of `f` w.r.t. every element of every input. Returns the
/// worst relative error across all elements.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64, mode: DiffMode) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Value<T>]) -> Result<Value<T>>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let base = eval_scalar(&f, inputs)?;
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for elem in 0..input.numel() {
            let n = numeric_grad_element(&f, inputs, which, elem, h, mode, base)?;
            let a = analytic[which].data()[elem].to_f64();
            worst = worst.max(rel_err(a, n));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but probing only `samples` randomly chosen elements per
/// input — for functions too expensive to probe exhaustively.
pub fn grad_check_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    mode: DiffMode,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Value<T>]) -> Result<Value<T>>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let base = eval_scalar(&f, inputs)?;
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let probes = samples.min(numel).max(1);
        for _ in 0..probes {
            let elem = rng.below(numel);
            let n = numeric_grad_element(&f, inputs, which, elem, h, mode, base)?;
            let a = analytic[which].data()[elem].to_f64();
            worst = worst.max(rel_err(a, n));
        }
    }
    Ok(worst)
}
