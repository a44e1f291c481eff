//! Helpers shared by the integration-test targets. Each target pulls in the
//! subset it needs, so allow the rest to go unused per target.
#![allow(dead_code)]

use resmask::error::Result;
use resmask::gradcheck::{grad_check, DiffMode};
use resmask::rng::Rng;
use resmask::tape::{fuse_residual_mask, Tape, Value};
use resmask::tensor::{Scalar, Tensor};

pub const PER_OP_TOL: f64 = 1e-4;
pub const BN_TOL: f64 = 1e-3;
pub const E2E_TOL: f64 = 1e-3;
pub const FD_H: f64 = 1e-5;

/// Reduce `v` with a fixed random projection so every element's gradient is
/// distinct (a bare sum would make many op-gradients uniform and hide
/// transposition bugs).
fn project<T: Scalar>(
    tape: &mut Tape<T>,
    v: &Value<T>,
    weights: &Tensor<T>,
) -> Result<Value<T>> {
    let w = tape.leaf(weights.clone().with_requires_grad(false));
    let prod = tape.mul(v, &w)?;
    tape.sum(&prod)
}

fn rand_dims(rng: &mut Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| lo + rng.below(hi - lo + 1)).collect()
}

fn uniform64(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, rng, lo, hi).expect("valid shape")
}

/// Values guaranteed pairwise-distinct by at least ~0.07, so max-pool windows
/// never tie and finite differences never cross an argmax switch.
fn well_separated(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..numel).collect();
    rng.shuffle(&mut order);
    let data: Vec<f64> = order
        .iter()
        .map(|&i| i as f64 * 0.1 + rng.uniform(0.0, 0.03) - numel as f64 * 0.05)
        .collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

pub struct Sweep {
    pub op: &'static str,
    pub configs: usize,
    pub tol: f64,
    pub worst: f64,
}

impl Sweep {
    pub fn ok(&self) -> bool {
        self.worst < self.tol
    }

    pub fn line(&self) -> String {
        format!(
            "{:<16} {:>4} configs  worst rel err {:.3e}  (tol {:.0e})",
            self.op, self.configs, self.worst, self.tol
        )
    }
}

fn run_sweep(
    op: &'static str,
    configs: usize,
    tol: f64,
    mut one: impl FnMut(&mut Rng) -> Result<f64>,
) -> Sweep {
    let mut worst = 0.0f64;
    for i in 0..configs {
        let mut rng = Rng::new(0xABC0 + i as u64);
        let err = one(&mut rng).expect("sweep config must evaluate");
        worst = worst.max(err);
    }
    Sweep { op, configs, tol, worst }
}

pub fn sweep_add(configs: usize) -> Sweep {
    run_sweep("add", configs, PER_OP_TOL, |rng| {
        let rank = 1 + rng.below(4);
        let shape = rand_dims(rng, rank, 1, 5);
        let a = uniform64(&shape, rng, -2.0, 2.0);
        let b = uniform64(&shape, rng, -2.0, 2.0);
        let w = uniform64(&shape, rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let s = tape.add(&ins[0], &ins[1])?;
                project(tape, &s, &w)
            },
            &[a, b],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_mul(configs: usize) -> Sweep {
    run_sweep("mul", configs, PER_OP_TOL, |rng| {
        let rank = 1 + rng.below(4);
        let shape = rand_dims(rng, rank, 1, 5);
        let a = uniform64(&shape, rng, -2.0, 2.0);
        let b = uniform64(&shape, rng, -2.0, 2.0);
        let w = uniform64(&shape, rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let p = tape.mul(&ins[0], &ins[1])?;
                project(tape, &p, &w)
            },
            &[a, b],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_scalar_ops(configs: usize) -> Sweep {
    run_sweep("scalar add/mul", configs, PER_OP_TOL, |rng| {
        let shape = rand_dims(rng, 2, 1, 6);
        let a = uniform64(&shape, rng, -2.0, 2.0);
        let w = uniform64(&shape, rng, -1.0, 1.0);
        let k1 = rng.uniform(-1.0, 1.0);
        let k2 = rng.uniform(0.5, 2.0);
        grad_check(
            |tape, ins| {
                let shifted = tape.add_scalar(&ins[0], k1)?;
                let scaled = tape.mul_scalar(&shifted, k2)?;
                project(tape, &scaled, &w)
            },
            &[a],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_matmul(configs: usize) -> Sweep {
    run_sweep("matmul", configs, PER_OP_TOL, |rng| {
        let (m, k, p) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
        let a = uniform64(&[m, k], rng, -2.0, 2.0);
        let b = uniform64(&[k, p], rng, -2.0, 2.0);
        let w = uniform64(&[m, p], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.matmul(&ins[0], &ins[1])?;
                project(tape, &y, &w)
            },
            &[a, b],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_add_bias(configs: usize) -> Sweep {
    run_sweep("add_bias", configs, PER_OP_TOL, |rng| {
        let (r, cdim) = (1 + rng.below(4), 1 + rng.below(5));
        let a = uniform64(&[r, cdim], rng, -2.0, 2.0);
        let b = uniform64(&[cdim], rng, -1.0, 1.0);
        let w = uniform64(&[r, cdim], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.add_bias(&ins[0], &ins[1])?;
                project(tape, &y, &w)
            },
            &[a, b],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_relu(configs: usize) -> Sweep {
    run_sweep("relu", configs, PER_OP_TOL, |rng| {
        let shape = rand_dims(rng, 3, 1, 4);
        let mut a = uniform64(&shape, rng, -2.0, 2.0);
        // keep every element away from the kink at 0 by more than the
        // finite-difference step
        for v in a.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let w = uniform64(&shape, rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.relu(&ins[0])?;
                project(tape, &y, &w)
            },
            &[a],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_sigmoid(configs: usize) -> Sweep {
    run_sweep("sigmoid", configs, PER_OP_TOL, |rng| {
        let shape = rand_dims(rng, 2, 1, 6);
        let a = uniform64(&shape, rng, -4.0, 4.0);
        let w = uniform64(&shape, rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.sigmoid(&ins[0])?;
                project(tape, &y, &w)
            },
            &[a],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_softmax(configs: usize) -> Sweep {
    run_sweep("softmax", configs, PER_OP_TOL, |rng| {
        let (r, cdim) = (1 + rng.below(4), 2 + rng.below(6));
        let a = uniform64(&[r, cdim], rng, -3.0, 3.0);
        let w = uniform64(&[r, cdim], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.softmax_rows(&ins[0])?;
                project(tape, &y, &w)
            },
            &[a],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_reshape_concat(configs: usize) -> Sweep {
    run_sweep("reshape/concat", configs, PER_OP_TOL, |rng| {
        let (n, c1, c2, h, wd) =
            (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let a = uniform64(&[n, c1 * h * wd], rng, -2.0, 2.0);
        let b = uniform64(&[n, c2, h, wd], rng, -2.0, 2.0);
        let w = uniform64(&[n, c1 + c2, h, wd], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let a4 = tape.reshape(&ins[0], &[n, c1, h, wd])?;
                let cat = tape.concat_channels(&a4, &ins[1])?;
                project(tape, &cat, &w)
            },
            &[a, b],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_conv2d(configs: usize) -> Sweep {
    run_sweep("conv2d", configs, PER_OP_TOL, |rng| {
        let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let (kh, kw) = (1 + rng.below(3), 1 + rng.below(3));
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let h = kh.max(2) + rng.below(4);
        let wd = kw.max(2) + rng.below(4);
        let x = uniform64(&[n, cin, h, wd], rng, -2.0, 2.0);
        let wt = uniform64(&[cout, cin, kh, kw], rng, -1.0, 1.0);
        let bias = uniform64(&[cout], rng, -0.5, 0.5);
        let with_bias = rng.flip();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let w = uniform64(&[n, cout, oh, ow], rng, -1.0, 1.0);
        let inputs: Vec<Tensor<f64>> =
            if with_bias { vec![x, wt, bias] } else { vec![x, wt] };
        grad_check(
            |tape, ins| {
                let b = if with_bias { Some(&ins[2]) } else { None };
                let y = tape.conv2d(&ins[0], &ins[1], b, stride, pad)?;
                project(tape, &y, &w)
            },
            &inputs,
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_maxpool(configs: usize) -> Sweep {
    run_sweep("maxpool2d", configs, PER_OP_TOL, |rng| {
        let (n, cdim) = (1 + rng.below(2), 1 + rng.below(2));
        let k = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(k); // pad < k keeps windows non-empty
        let h = k + rng.below(4);
        let wd = k + rng.below(4);
        let x = well_separated(&[n, cdim, h, wd], rng);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let w = uniform64(&[n, cdim, oh, ow], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.maxpool2d(&ins[0], k, stride, pad)?;
                project(tape, &y, &w)
            },
            &[x],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_global_avgpool(configs: usize) -> Sweep {
    run_sweep("global_avgpool", configs, PER_OP_TOL, |rng| {
        let shape = [1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5)];
        let x = uniform64(&shape, rng, -2.0, 2.0);
        let w = uniform64(&[shape[0], shape[1], 1, 1], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.global_avgpool(&ins[0])?;
                project(tape, &y, &w)
            },
            &[x],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_upsample(configs: usize) -> Sweep {
    run_sweep("upsample_to", configs, PER_OP_TOL, |rng| {
        let (n, cdim, h, wd) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let (th, tw) = (h + rng.below(5), wd + rng.below(5));
        let x = uniform64(&[n, cdim, h, wd], rng, -2.0, 2.0);
        let w = uniform64(&[n, cdim, th, tw], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.upsample_to(&ins[0], th, tw)?;
                project(tape, &y, &w)
            },
            &[x],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_bn_train(configs: usize) -> Sweep {
    run_sweep("batchnorm train", configs, BN_TOL, |rng| {
        let (n, cdim, h, wd) = (2 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let x = uniform64(&[n, cdim, h, wd], rng, -2.0, 2.0);
        let gamma = uniform64(&[cdim], rng, 0.5, 1.5);
        let beta = uniform64(&[cdim], rng, -0.5, 0.5);
        let w = uniform64(&[n, cdim, h, wd], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let (y, _, _) = tape.batchnorm_train(&ins[0], &ins[1], &ins[2], 1e-5)?;
                project(tape, &y, &w)
            },
            &[x, gamma, beta],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_bn_eval(configs: usize) -> Sweep {
    run_sweep("batchnorm eval", configs, BN_TOL, |rng| {
        let (n, cdim, h, wd) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let x = uniform64(&[n, cdim, h, wd], rng, -2.0, 2.0);
        let gamma = uniform64(&[cdim], rng, 0.5, 1.5);
        let beta = uniform64(&[cdim], rng, -0.5, 0.5);
        let mean: Vec<f64> = (0..cdim).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let var: Vec<f64> = (0..cdim).map(|_| rng.uniform(0.5, 1.5)).collect();
        let w = uniform64(&[n, cdim, h, wd], rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let y = tape.batchnorm_eval(&ins[0], &ins[1], &ins[2], &mean, &var, 1e-5)?;
                project(tape, &y, &w)
            },
            &[x, gamma, beta],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_cross_entropy(configs: usize) -> Sweep {
    run_sweep("cross_entropy", configs, PER_OP_TOL, |rng| {
        let rows = 1 + rng.below(5);
        let classes = 2 + rng.below(6);
        let logits = uniform64(&[rows, classes], rng, -3.0, 3.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        grad_check(
            |tape, ins| {
                let (loss, _) = tape.cross_entropy(&ins[0], &labels)?;
                Ok(loss)
            },
            &[logits],
            FD_H,
            DiffMode::Central,
        )
    })
}

pub fn sweep_fusion(configs: usize) -> Sweep {
    run_sweep("mask fusion", configs, PER_OP_TOL, |rng| {
        let shape = [1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4)];
        let r = uniform64(&shape, rng, -2.0, 2.0);
        let m_raw = uniform64(&shape, rng, -3.0, 3.0);
        let w = uniform64(&shape, rng, -1.0, 1.0);
        grad_check(
            |tape, ins| {
                let m = tape.sigmoid(&ins[1])?;
                let fused = fuse_residual_mask(tape, &ins[0], &m)?;
                project(tape, &fused, &w)
            },
            &[r, m_raw],
            FD_H,
            DiffMode::Central,
        )
    })
}

/// Every per-op sweep at the given config count, in a stable order.
pub fn all_op_sweeps(configs: usize) -> Vec<Sweep> {
    vec![
        sweep_add(configs),
        sweep_mul(configs),
        sweep_scalar_ops(configs),
        sweep_matmul(configs),
        sweep_add_bias(configs),
        sweep_relu(configs),
        sweep_sigmoid(configs),
        sweep_softmax(configs),
        sweep_reshape_concat(configs),
        sweep_conv2d(configs),
        sweep_maxpool(configs),
        sweep_global_avgpool(configs),
        sweep_upsample(configs),
        sweep_bn_train(configs),
        sweep_bn_eval(configs),
        sweep_cross_entropy(configs),
        sweep_fusion(configs),
    ]
}

/// Write a tiny ring image as a binary PGM for CLI tests.
pub fn write_test_pgm(path: &std::path::Path) {
    let size = 48usize;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - 24.0;
            let dy = y as f64 - 24.0;
            let r = (dx * dx + dy * dy).sqrt();
            let v = 200.0 * (-((r - 8.0) * (r - 8.0)) / 8.0).exp();
            pixels.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).expect("write test image");
}

/// Compare the im2col convolution against the naive reference over `configs`
/// random geometries with inputs at most 8x8, requiring bitwise equality.
/// Returns (configs checked, output elements compared); panics on mismatch.
pub fn conv_bitwise_sweep(seed: u64, configs: usize) -> (usize, usize) {
    use resmask::kernels::{conv2d_im2col, conv2d_naive};
    let mut rng = Rng::new(seed);
    let mut checked = 0usize;
    let mut elements = 0usize;
    while checked < configs {
        let n = 1 + rng.below(2);
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(4);
        let h = 1 + rng.below(8);
        let w = 1 + rng.below(8);
        let kh = 1 + rng.below(4);
        let kw = 1 + rng.below(4);
        let stride = 1 + rng.below(3);
        let pad = rng.below(3);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            continue;
        }

        let x = Tensor::<f64>::uniform(&[n, cin, h, w], &mut rng, -2.0, 2.0).unwrap();
        let wt = Tensor::<f64>::uniform(&[cout, cin, kh, kw], &mut rng, -1.5, 1.5).unwrap();
        let bias = if rng.flip() {
            Some(Tensor::<f64>::uniform(&[cout], &mut rng, -1.0, 1.0).unwrap())
        } else {
            None
        };

        let (fast, _) = conv2d_im2col(&x, &wt, bias.as_ref(), stride, pad).unwrap();
        let slow = conv2d_naive(&x, &wt, bias.as_ref(), stride, pad).unwrap();

        assert_eq!(fast.shape(), slow.shape(), "shape mismatch for config {checked}");
        for (i, (a, b)) in fast.data().iter().zip(slow.data()).enumerate() {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "config {checked} (n={n} cin={cin} cout={cout} {h}x{w} k={kh}x{kw} \
                 s={stride} p={pad} bias={}) differs at element {i}: {a} vs {b}",
                bias.is_some(),
            );
        }
        elements += fast.numel();
        checked += 1;
    }
    (checked, elements)
}

/// Absolute difference in representation steps between two f32 values, for
/// bit-exactness statements with a one-rounding-unit allowance.
pub fn f32_ulp_diff(a: f32, b: f32) -> u32 {
    let ia = a.to_bits() as i64;
    let ib = b.to_bits() as i64;
    (ia - ib).unsigned_abs() as u32
}
