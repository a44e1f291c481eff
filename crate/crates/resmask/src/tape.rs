//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every differentiable operation as a node holding its
//! operands (by node index), its output tensor, and whatever context the
//! backward rule needs (pool argmax indices, batchnorm statistics, ...).
//! [`Tape::backward`] walks the nodes once in reverse, accumulating gradients.
//!
//! The same ops run with a non-recording tape for inference: nothing is
//! retained, so intermediate activations free as soon as the last [`Value`]
//! referencing them drops.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::conv::{gemm_nt_acc, gemm_tn_acc};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Stable index of a trainable parameter within a network's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Handle to a tensor produced under a tape. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Value<T> {
    data: Arc<Tensor<T>>,
    /// (tape id, node index) when this value is recorded somewhere.
    origin: Option<(u64, usize)>,
}

impl<T: Scalar> Value<T> {
    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.data).clone()
    }
}

struct Node<T> {
    op: Op<T>,
    out: Arc<Tensor<T>>,
    needs_grad: bool,
    /// Set on leaves registered through [`Tape::param`].
    param: Option<ParamId>,
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, k: T },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddBias { a: usize, bias: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    Sum { a: usize },
    Reshape { a: usize },
    ConcatCh { a: usize, b: usize, ca: usize, cb: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: usize },
    Upsample { x: usize },
    BnTrain { x: usize, gamma: usize, beta: usize, x_hat: Arc<Tensor<T>>, inv_std: Vec<T> },
    BnEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, var: Vec<T>, eps: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Arc<Tensor<T>> },
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    /// One leaf per parameter, so a parameter used several times accumulates
    /// its gradient on a single node.
    param_nodes: HashMap<ParamId, usize>,
    recording: bool,
    consumed: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    tape_id: u64,
    by_param: HashMap<ParamId, Tensor<T>>,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Gradient w.r.t. a retained or leaf value from the same tape.
    pub fn wrt(&self, v: &Value<T>) -> Option<&Tensor<T>> {
        match v.origin {
            Some((tid, idx)) if tid == self.tape_id => self.by_node.get(&idx),
            _ => None,
        }
    }

    pub fn into_param_map(self) -> HashMap<ParamId, Tensor<T>> {
        self.by_param
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records for a later [`Tape::backward`].
    pub fn recording() -> Tape<T> {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that executes ops eagerly and retains nothing.
    pub fn no_grad() -> Tape<T> {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op<T>, out: Arc<Tensor<T>>, needs_grad: bool, param: Option<ParamId>) -> Option<(u64, usize)> {
        if !self.recording {
            return None;
        }
        self.nodes.push(Node { op, out, needs_grad, param });
        Some((self.id, self.nodes.len() - 1))
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Resolve a value to a node index on *this* tape, lifting off-tape
    /// constants automatically. Requires-grad tensors must be lifted explicitly
    /// through [`Tape::leaf`] so their gradient lands on a single node.
    fn id_of(&mut self, v: &Value<T>) -> Result<usize> {
        debug_assert!(self.recording);
        match v.origin {
            Some((tid, idx)) if tid == self.id => Ok(idx),
            Some(_) => Err(Error::Contract(
                "value belongs to a different tape; re-run the forward pass on this tape".into(),
            )),
            None => {
                if v.data.requires_grad() {
                    return Err(Error::Contract(
                        "requires-grad tensor used without tape.leaf(); lift it first".into(),
                    ));
                }
                self.nodes.push(Node {
                    op: Op::Leaf,
                    out: Arc::clone(&v.data),
                    needs_grad: false,
                    param: None,
                });
                Ok(self.nodes.len() - 1)
            }
        }
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether the
    /// backward sweep produces a gradient for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Value<T> {
        let needs = t.requires_grad();
        let data = Arc::new(t);
        let origin = if self.consumed {
            None
        } else {
            self.push(Op::Leaf, Arc::clone(&data), needs, None)
        };
        Value { data, origin }
    }

    /// Register a trainable parameter (shared, not copied). Registering the
    /// same parameter again returns the existing leaf.
    pub fn param(&mut self, id: ParamId, t: &Arc<Tensor<T>>) -> Value<T> {
        if let Some(&idx) = self.param_nodes.get(&id) {
            return Value { data: Arc::clone(t), origin: Some((self.id, idx)) };
        }
        let origin = if self.consumed {
            None
        } else {
            self.push(Op::Leaf, Arc::clone(t), true, Some(id))
        };
        if let Some((_, idx)) = origin {
            self.param_nodes.insert(id, idx);
        }
        Value { data: Arc::clone(t), origin }
    }

    fn unary_result(
        &mut self,
        out: Tensor<T>,
        op: impl FnOnce(usize) -> Op<T>,
        input: &Value<T>,
    ) -> Result<Value<T>> {
        let data = Arc::new(out);
        let origin = if self.recording {
            let a = self.id_of(input)?;
            let needs = self.needs(a);
            self.push(op(a), Arc::clone(&data), needs, None)
        } else {
            None
        };
        Ok(Value { data, origin })
    }

    fn binary_result(
        &mut self,
        out: Tensor<T>,
        op: impl FnOnce(usize, usize) -> Op<T>,
        lhs: &Value<T>,
        rhs: &Value<T>,
    ) -> Result<Value<T>> {
        let data = Arc::new(out);
        let origin = if self.recording {
            let a = self.id_of(lhs)?;
            let b = self.id_of(rhs)?;
            let needs = self.needs(a) || self.needs(b);
            self.push(op(a, b), Arc::clone(&data), needs, None)
        } else {
            None
        };
        Ok(Value { data, origin })
    }

    // ----- element-wise ------------------------------------------------------

    pub fn add(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        if !a.data.same_shape(&b.data) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::raw(
            a.shape().to_vec(),
            a.data.data().iter().zip(b.data.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.binary_result(out, |a, b| Op::Add { a, b }, a, b)
    }

    pub fn mul(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        if !a.data.same_shape(&b.data) {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::raw(
            a.shape().to_vec(),
            a.data.data().iter().zip(b.data.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.binary_result(out, |a, b| Op::Mul { a, b }, a, b)
    }

    pub fn add_scalar(&mut self, a: &Value<T>, k: T) -> Result<Value<T>> {
        self.guard()?;
        let out = a.data.map(|x| x + k);
        self.unary_result(out, |a| Op::AddScalar { a }, a)
    }

    pub fn mul_scalar(&mut self, a: &Value<T>, k: T) -> Result<Value<T>> {
        self.guard()?;
        let out = a.data.map(|x| x * k);
        self.unary_result(out, move |a| Op::MulScalar { a, k }, a)
    }

    // ----- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let (m, k) = a.data.dims2()?;
        let (k2, n) = b.data.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::conv::gemm_acc(m, k, n, a.data.data(), b.data.data(), &mut out);
        let out = Tensor::raw(vec![m, n], out);
        self.binary_result(out, move |a, b| Op::Matmul { a, b, m, k, n }, a, b)
    }

    /// `[rows, features] + [features]`, broadcast over rows.
    pub fn add_bias(&mut self, a: &Value<T>, bias: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let (rows, feats) = a.data.dims2()?;
        if bias.shape() != [feats] {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} does not match {feats} features",
                bias.shape()
            )));
        }
        let bd = bias.data.data();
        let mut out = a.data.data().to_vec();
        for r in 0..rows {
            add_assign(&mut out[r * feats..(r + 1) * feats], bd);
        }
        let out = Tensor::raw(a.shape().to_vec(), out);
        self.binary_result(out, |a, bias| Op::AddBias { a, bias }, a, bias)
    }

    // ----- activations -------------------------------------------------------

    pub fn relu(&mut self, a: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let out = a.data.map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary_result(out, |a| Op::Relu { a }, a)
    }

    /// Logistic sigmoid, clamped into the open interval (0, 1) so downstream
    /// logs and masks never see an exact 0 or 1 even at f32 saturation.
    pub fn sigmoid(&mut self, a: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let out = a.data.map(|x| {
            let s = if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            s.min(T::one_below()).max(T::tiny())
        });
        self.unary_result(out, |a| Op::Sigmoid { a }, a)
    }

    pub fn softmax_rows(&mut self, a: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let out = kernels::softmax_rows(&a.data)?;
        self.unary_result(out, |a| Op::Softmax { a }, a)
    }

    // ----- reductions / shape ------------------------------------------------

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let mut acc = T::zero();
        for &v in a.data.data() {
            acc += v;
        }
        let out = Tensor::raw(vec![1], vec![acc]);
        self.unary_result(out, |a| Op::Sum { a }, a)
    }

    pub fn reshape(&mut self, a: &Value<T>, shape: &[usize]) -> Result<Value<T>> {
        self.guard()?;
        let out = Tensor::from_vec(shape, a.data.data().to_vec())?;
        self.unary_result(out, |a| Op::Reshape { a }, a)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let (n, ca, h, w) = a.data.dims4()?;
        let (n2, cb, h2, w2) = b.data.dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity((ca + cb) * n * plane);
        for item in 0..n {
            out.extend_from_slice(&a.data.data()[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&b.data.data()[item * cb * plane..(item + 1) * cb * plane]);
        }
        let out = Tensor::raw(vec![n, ca + cb, h, w], out);
        self.binary_result(out, move |a, b| Op::ConcatCh { a, b, ca, cb }, a, b)
    }

    // ----- structured ops ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: &Value<T>,
        w: &Value<T>,
        bias: Option<&Value<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Value<T>> {
        self.guard()?;
        let (out, geom) = kernels::conv2d_im2col(&x.data, &w.data, bias.map(|b| &*b.data), stride, pad)?;
        let data = Arc::new(out);
        let origin = if self.recording {
            let xi = self.id_of(x)?;
            let wi = self.id_of(w)?;
            let bi = match bias {
                Some(b) => Some(self.id_of(b)?),
                None => None,
            };
            let needs =
                self.needs(xi) || self.needs(wi) || bi.map_or(false, |b| self.needs(b));
            self.push(Op::Conv2d { x: xi, w: wi, bias: bi, geom }, Arc::clone(&data), needs, None)
        } else {
            None
        };
        Ok(Value { data, origin })
    }

    pub fn maxpool2d(&mut self, x: &Value<T>, k: usize, stride: usize, pad: usize) -> Result<Value<T>> {
        self.guard()?;
        let (out, argmax, _) = kernels::maxpool2d(&x.data, k, stride, pad)?;
        let data = Arc::new(out);
        let origin = if self.recording {
            let xi = self.id_of(x)?;
            let needs = self.needs(xi);
            self.push(Op::MaxPool { x: xi, argmax }, Arc::clone(&data), needs, None)
        } else {
            None
        };
        Ok(Value { data, origin })
    }

    pub fn global_avgpool(&mut self, x: &Value<T>) -> Result<Value<T>> {
        self.guard()?;
        let out = kernels::global_avgpool(&x.data)?;
        self.unary_result(out, |x| Op::GlobalAvgPool { x }, x)
    }

    pub fn upsample_to(&mut self, x: &Value<T>, th: usize, tw: usize) -> Result<Value<T>> {
        self.guard()?;
        let out = kernels::upsample_to(&x.data, th, tw)?;
        self.unary_result(out, |x| Op::Upsample { x }, x)
    }

    /// Batch-statistics normalization. Returns the output plus the biased batch
    /// mean/variance so the caller can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: &Value<T>,
        gamma: &Value<T>,
        beta: &Value<T>,
        eps: f64,
    ) -> Result<(Value<T>, Vec<T>, Vec<T>)> {
        self.guard()?;
        let o = kernels::bn_train(&x.data, &gamma.data, &beta.data, eps)?;
        let data = Arc::new(o.y);
        let origin = if self.recording {
            let xi = self.id_of(x)?;
            let gi = self.id_of(gamma)?;
            let bi = self.id_of(beta)?;
            let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
            self.push(
                Op::BnTrain {
                    x: xi,
                    gamma: gi,
                    beta: bi,
                    x_hat: Arc::new(o.x_hat),
                    inv_std: o.inv_std,
                },
                Arc::clone(&data),
                needs,
                None,
            )
        } else {
            None
        };
        Ok((Value { data, origin }, o.mean, o.var))
    }

    /// Running-statistics normalization (a per-channel affine map).
    pub fn batchnorm_eval(
        &mut self,
        x: &Value<T>,
        gamma: &Value<T>,
        beta: &Value<T>,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Value<T>> {
        self.guard()?;
        let out = kernels::bn_eval(&x.data, &gamma.data, &beta.data, mean, var, eps)?;
        let data = Arc::new(out);
        let origin = if self.recording {
            let xi = self.id_of(x)?;
            let gi = self.id_of(gamma)?;
            let bi = self.id_of(beta)?;
            let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
            self.push(
                Op::BnEval {
                    x: xi,
                    gamma: gi,
                    beta: bi,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    eps,
                },
                Arc::clone(&data),
                needs,
                None,
            )
        } else {
            None
        };
        Ok(Value { data, origin })
    }

    /// Softmax cross-entropy against integer labels; returns the `[1]` loss and
    /// the softmax probabilities.
    pub fn cross_entropy(&mut self, logits: &Value<T>, labels: &[usize]) -> Result<(Value<T>, Tensor<T>)> {
        self.guard()?;
        let (loss, probs) = kernels::cross_entropy(&logits.data, labels)?;
        let probs_arc = Arc::new(probs);
        let data = Arc::new(Tensor::raw(vec![1], vec![loss]));
        let origin = if self.recording {
            let li = self.id_of(logits)?;
            let needs = self.needs(li);
            self.push(
                Op::CrossEntropy {
                    logits: li,
                    labels: labels.to_vec(),
                    probs: Arc::clone(&probs_arc),
                },
                Arc::clone(&data),
                needs,
                None,
            )
        } else {
            None
        };
        Ok((Value { data, origin }, (*probs_arc).clone()))
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse sweep from `root` (a single-element value). Consumes the tape:
    /// recording again requires a fresh forward pass.
    pub fn backward(&mut self, root: &Value<T>) -> Result<Gradients<T>> {
        self.backward_retaining(root, &[])
    }

    /// Like [`Tape::backward`], additionally keeping gradients for `retain`
    /// (e.g. an internal activation a saliency map needs).
    pub fn backward_retaining(&mut self, root: &Value<T>, retain: &[&Value<T>]) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_idx = match root.origin {
            Some((tid, idx)) if tid == self.id => idx,
            _ => return Err(Error::NotOnTape),
        };
        if root.data.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a single-element tensor, got shape {:?}",
                root.shape()
            )));
        }
        self.consumed = true;

        let mut retain_idx: Vec<usize> = Vec::new();
        for v in retain {
            match v.origin {
                Some((tid, idx)) if tid == self.id => retain_idx.push(idx),
                _ => return Err(Error::NotOnTape),
            }
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root_idx] = Some(vec![T::one()]);

        for i in (0..=root_idx).rev() {
            // Nodes that cannot affect any requires-grad leaf are never given
            // gradients, so `None` also covers the pruned subgraph.
            let Some(g_vec) = grads[i].take() else { continue };
            let g = Tensor::raw(self.nodes[i].out.shape().to_vec(), g_vec);
            self.apply_backward(i, &g, &mut grads);
            // keep the gradient if someone asked for this node
            if retain_idx.contains(&i) || self.nodes[i].param.is_some() || matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g.into_data());
            }
        }

        let mut by_param = HashMap::new();
        let mut by_node = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let shape = node.out.shape().to_vec();
            let take = node.param.is_some()
                || retain_idx.contains(&i)
                || (matches!(node.op, Op::Leaf) && node.needs_grad);
            if !take {
                continue;
            }
            // every requires-grad leaf gets a gradient, zero if disconnected
            let g = match grads[i].take() {
                Some(v) => Tensor::raw(shape, v),
                None => Tensor::zeros(&shape).expect("leaf shape is valid"),
            };
            if let Some(pid) = node.param {
                by_param.insert(pid, g);
            } else {
                by_node.insert(i, g);
            }
        }
        // retained non-leaf nodes may also be params-free internal activations
        for &idx in &retain_idx {
            if !by_node.contains_key(&idx) && self.nodes[idx].param.is_none() {
                let shape = self.nodes[idx].out.shape().to_vec();
                by_node.insert(idx, Tensor::zeros(&shape).expect("node shape is valid"));
            }
        }

        // Drop the graph now rather than when the tape goes out of scope, so
        // activations — and the tape's holds on parameter tensors — free before
        // the caller's optimizer step.
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.param_nodes.clear();

        Ok(Gradients { tape_id: self.id, by_param, by_node })
    }

    /// Accumulate `grad` into `slot[idx]` lazily (zero-init on first touch),
    /// unless node `idx` is pruned.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], idx: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); self.nodes[idx].out.numel()]))
    }

    fn apply_backward(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Vec<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(sa) = self.slot(grads, *a) {
                    add_assign(sa, gd);
                }
                if let Some(sb) = self.slot(grads, *b) {
                    add_assign(sb, gd);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[*a].out.data(), self.nodes[*b].out.data());
                if let Some(sa) = self.slot(grads, *a) {
                    for j in 0..gd.len() {
                        sa[j] += gd[j] * bd[j];
                    }
                }
                if let Some(sb) = self.slot(grads, *b) {
                    for j in 0..gd.len() {
                        sb[j] += gd[j] * ad[j];
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(sa) = self.slot(grads, *a) {
                    add_assign(sa, gd);
                }
            }
            Op::MulScalar { a, k } => {
                let k = *k;
                if let Some(sa) = self.slot(grads, *a) {
                    for j in 0..gd.len() {
                        sa[j] += gd[j] * k;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.nodes[*a].out.data(), self.nodes[*b].out.data());
                if self.nodes[*a].needs_grad {
                    let sa = self.slot(grads, *a).expect("checked");
                    gemm_nt_acc(m, n, k, gd, bd, sa);
                }
                if self.nodes[*b].needs_grad {
                    let sb = self.slot(grads, *b).expect("checked");
                    gemm_tn_acc(m, k, n, ad, gd, sb);
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(sa) = self.slot(grads, *a) {
                    add_assign(sa, gd);
                }
                if self.nodes[*bias].needs_grad {
                    let feats = self.nodes[*bias].out.numel();
                    let sb = self.slot(grads, *bias).expect("checked");
                    for (j, &v) in gd.iter().enumerate() {
                        sb[j % feats] += v;
                    }
                }
            }
            Op::Relu { a } => {
                let od = self.nodes[i].out.data();
                if let Some(sa) = self.slot(grads, *a) {
                    for j in 0..gd.len() {
                        if od[j] > T::zero() {
                            sa[j] += gd[j];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let od = self.nodes[i].out.data();
                if let Some(sa) = self.slot(grads, *a) {
                    for j in 0..gd.len() {
                        sa[j] += gd[j] * od[j] * (T::one() - od[j]);
                    }
                }
            }
            Op::Softmax { a } => {
                let p = self.nodes[i].out.data();
                let cols = *self.nodes[i].out.shape().last().expect("rank >= 1");
                if let Some(sa) = self.slot(grads, *a) {
                    for r in 0..gd.len() / cols {
                        let s = r * cols;
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot += gd[s + j] * p[s + j];
                        }
                        for j in 0..cols {
                            sa[s + j] += p[s + j] * (gd[s + j] - dot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let gv = gd[0];
                if let Some(sa) = self.slot(grads, *a) {
                    for v in sa.iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(sa) = self.slot(grads, *a) {
                    add_assign(sa, gd);
                }
            }
            Op::ConcatCh { a, b, ca, cb } => {
                let (n, ctot, h, w) = g.dims4().expect("concat grad is rank 4");
                debug_assert_eq!(ctot, ca + cb);
                let plane = h * w;
                if let Some(sa) = self.slot(grads, *a) {
                    for item in 0..n {
                        let src = &gd[item * ctot * plane..item * ctot * plane + ca * plane];
                        add_assign(&mut sa[item * ca * plane..(item + 1) * ca * plane], src);
                    }
                }
                if let Some(sb) = self.slot(grads, *b) {
                    for item in 0..n {
                        let s = item * ctot * plane + ca * plane;
                        let src = &gd[s..s + cb * plane];
                        add_assign(&mut sb[item * cb * plane..(item + 1) * cb * plane], src);
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let want_bias = bias.map_or(false, |b| self.nodes[b].needs_grad);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &self.nodes[*x].out,
                    &self.nodes[*w].out,
                    g,
                    geom,
                    want_bias,
                );
                if let Some(sx) = self.slot(grads, *x) {
                    add_assign(sx, gx.data());
                }
                if let Some(sw) = self.slot(grads, *w) {
                    add_assign(sw, gw.data());
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    if let Some(sb) = self.slot(grads, *b) {
                        add_assign(sb, gb.data());
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.nodes[*x].needs_grad {
                    let shape = self.nodes[*x].out.shape().to_vec();
                    let numel = self.nodes[*x].out.numel();
                    let gx = kernels::maxpool2d_backward(g, argmax, numel, &shape);
                    let sx = self.slot(grads, *x).expect("checked");
                    add_assign(sx, gx.data());
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.nodes[*x].needs_grad {
                    let gx = kernels::global_avgpool_backward(g, self.nodes[*x].out.shape());
                    let sx = self.slot(grads, *x).expect("checked");
                    add_assign(sx, gx.data());
                }
            }
            Op::Upsample { x } => {
                if self.nodes[*x].needs_grad {
                    let gx = kernels::upsample_to_backward(g, self.nodes[*x].out.shape());
                    let sx = self.slot(grads, *x).expect("checked");
                    add_assign(sx, gx.data());
                }
            }
            Op::BnTrain { x, gamma, beta, x_hat, inv_std } => {
                let (gx, dgamma, dbeta) =
                    kernels::bn_train_backward(g, x_hat, inv_std, &self.nodes[*gamma].out);
                if let Some(sx) = self.slot(grads, *x) {
                    add_assign(sx, gx.data());
                }
                if let Some(sg) = self.slot(grads, *gamma) {
                    add_assign(sg, dgamma.data());
                }
                if let Some(sb) = self.slot(grads, *beta) {
                    add_assign(sb, dbeta.data());
                }
            }
            Op::BnEval { x, gamma, beta, mean, var, eps } => {
                let (gx, dgamma, dbeta) = kernels::bn_eval_backward(
                    g,
                    &self.nodes[*x].out,
                    &self.nodes[*gamma].out,
                    mean,
                    var,
                    *eps,
                );
                if let Some(sx) = self.slot(grads, *x) {
                    add_assign(sx, gx.data());
                }
                if let Some(sg) = self.slot(grads, *gamma) {
                    add_assign(sg, dgamma.data());
                }
                if let Some(sb) = self.slot(grads, *beta) {
                    add_assign(sb, dbeta.data());
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.nodes[*logits].needs_grad {
                    let gl = kernels::cross_entropy_backward(probs, labels, gd[0]);
                    let sl = self.slot(grads, *logits).expect("checked");
                    add_assign(sl, gl.data());
                }
            }
        }
    }
}

/// The fusion at the heart of the architecture: out = residual + residual * mask,
/// i.e. the residual features scaled by (1 + mask).
pub fn fuse_residual_mask<T: Scalar>(
    tape: &mut Tape<T>,
    residual: &Value<T>,
    mask: &Value<T>,
) -> Result<Value<T>> {
    let scaled = tape.mul(residual, mask)?;
    tape.add(residual, &scaled)
}

/// Convenience for lifting a fresh tensor with gradient tracking enabled.
pub fn grad_leaf<T: Scalar>(tape: &mut Tape<T>, t: Tensor<T>) -> Value<T> {
    tape.leaf(t.with_requires_grad(true))
}

#[allow(unused)]
pub(crate) fn scalar_of<T: Scalar>(v: &Value<T>) -> T {
    debug_assert_eq!(v.data().numel(), 1);
    v.data().data()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn add_and_mul_forward_values() {
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let s = tape.add(&a, &b).unwrap();
        let p = tape.mul(&a, &b).unwrap();
        assert_eq!(s.data().data(), &[11.0, 22.0, 33.0]);
        assert_eq!(p.data().data(), &[10.0, 40.0, 90.0]);
    }

    #[test]
    fn elementwise_ops_commute() {
        let mut rng = Rng::new(8);
        let ta = Tensor::<f32>::uniform(&[2, 5], &mut rng, -1.0, 1.0).unwrap();
        let tb = Tensor::<f32>::uniform(&[2, 5], &mut rng, -1.0, 1.0).unwrap();
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(ta);
        let b = tape.leaf(tb);
        assert_eq!(tape.add(&a, &b).unwrap().data(), tape.add(&b, &a).unwrap().data());
        assert_eq!(tape.mul(&a, &b).unwrap().data(), tape.mul(&b, &a).unwrap().data());
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut rng = Rng::new(12);
        let t = Tensor::<f32>::uniform(&[4, 4], &mut rng, -5.0, 5.0).unwrap();
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(t.clone());
        let ones = tape.leaf(Tensor::ones(&[4, 4]).unwrap());
        let out = tape.mul(&a, &ones).unwrap();
        assert_eq!(out.data().data(), t.data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3, 2]).unwrap());
        let err = tape.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_known_2x2() {
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn backward_of_sum_of_product_gives_each_operand() {
        let mut tape = Tape::<f64>::recording();
        let a = grad_leaf(&mut tape, Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap());
        let b = grad_leaf(&mut tape, Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap());
        let p = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn value_used_twice_accumulates_gradient() {
        // loss = sum(a * a) => d/da = 2a
        let mut tape = Tape::<f64>::recording();
        let a = grad_leaf(&mut tape, Tensor::from_vec(&[3], vec![1.0, -2.0, 4.0]).unwrap());
        let p = tape.mul(&a, &a).unwrap();
        let loss = tape.sum(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[2.0, -4.0, 8.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::recording();
        let a = grad_leaf(&mut tape, Tensor::ones(&[2]).unwrap());
        let loss = tape.sum(&a).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_on_detached_value_is_an_error() {
        let mut no_grad = Tape::<f64>::no_grad();
        let a = no_grad.leaf(Tensor::ones(&[2]).unwrap());
        let loss = no_grad.sum(&a).unwrap();
        let mut rec = Tape::<f64>::recording();
        assert!(matches!(rec.backward(&loss), Err(Error::NotOnTape)));
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = Tape::<f64>::recording();
        let a = grad_leaf(&mut tape, Tensor::ones(&[2, 2]).unwrap());
        let double = tape.add(&a, &a).unwrap();
        assert!(matches!(tape.backward(&double), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::recording();
        let a = grad_leaf(&mut tape, Tensor::ones(&[2]).unwrap());
        let b = grad_leaf(&mut tape, Tensor::ones(&[3]).unwrap());
        let loss = tape.sum(&a).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&b).unwrap().data(), &[0.0; 3], "unused leaf still gets a (zero) grad");
    }

    #[test]
    fn no_grad_tape_retains_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(Tensor::ones(&[8]).unwrap());
        let b = tape.relu(&a).unwrap();
        let _ = tape.sum(&b).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn values_cannot_cross_tapes() {
        let mut t1 = Tape::<f32>::recording();
        let a = t1.leaf(Tensor::ones(&[2]).unwrap());
        let mut t2 = Tape::<f32>::recording();
        let b = t2.leaf(Tensor::ones(&[2]).unwrap());
        assert!(matches!(t2.add(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(404);
            let mut tape = Tape::<f32>::recording();
            let x = grad_leaf(
                &mut tape,
                Tensor::uniform(&[2, 3, 6, 6], &mut rng, -1.0, 1.0).unwrap(),
            );
            let w = grad_leaf(
                &mut tape,
                Tensor::uniform(&[4, 3, 3, 3], &mut rng, -1.0, 1.0).unwrap(),
            );
            let y = tape.conv2d(&x, &w, None, 1, 1).unwrap();
            let r = tape.relu(&y).unwrap();
            let loss = tape.sum(&r).unwrap();
            let grads = tape.backward(&loss).unwrap();
            (
                grads.wrt(&x).unwrap().data().to_vec(),
                grads.wrt(&w).unwrap().data().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval() {
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(Tensor::from_vec(&[3], vec![-200.0, 0.0, 200.0]).unwrap());
        let s = tape.sigmoid(&a).unwrap();
        let d = s.data().data();
        assert!(d[0] > 0.0, "sigmoid(-200) must stay above 0, got {}", d[0]);
        assert_eq!(d[1], 0.5);
        assert!(d[2] < 1.0, "sigmoid(200) must stay below 1, got {}", d[2]);
    }

    #[test]
    fn softmax_rows_sum_to_one_through_tape() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.leaf(Tensor::uniform(&[5, 7], &mut rng, -3.0, 3.0).unwrap());
        let p = tape.softmax_rows(&a).unwrap();
        for r in 0..5 {
            let s: f32 = p.data().data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_with_zero_mask_is_identity_and_one_mask_doubles() {
        let mut rng = Rng::new(42);
        let t = Tensor::<f32>::uniform(&[1, 2, 3, 3], &mut rng, -2.0, 2.0).unwrap();
        let mut tape = Tape::<f32>::no_grad();
        let r = tape.leaf(t.clone());
        let zero_mask = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let one_mask = tape.leaf(Tensor::ones(&[1, 2, 3, 3]).unwrap());
        let same = fuse_residual_mask(&mut tape, &r, &zero_mask).unwrap();
        assert_eq!(same.data().data(), t.data(), "zero mask must pass features through exactly");
        let doubled = fuse_residual_mask(&mut tape, &r, &one_mask).unwrap();
        for (y, x) in doubled.data().data().iter().zip(t.data()) {
            assert_eq!(*y, 2.0 * x, "unit mask must double features exactly");
        }
    }

    #[test]
    fn fused_magnitude_never_shrinks_nonnegative_features() {
        let mut rng = Rng::new(77);
        let mut tape = Tape::<f32>::no_grad();
        let r = tape.leaf(Tensor::uniform(&[1, 1, 4, 4], &mut rng, 0.0, 3.0).unwrap());
        let m = tape.leaf(Tensor::uniform(&[1, 1, 4, 4], &mut rng, 0.0, 1.0).unwrap());
        let fused = fuse_residual_mask(&mut tape, &r, &m).unwrap();
        for (y, x) in fused.data().data().iter().zip(r.data().data()) {
            assert!(y.abs() >= x.abs(), "fusion must not attenuate: {y} vs {x}");
        }
    }

    #[test]
    fn cross_entropy_through_tape_matches_kernel() {
        let mut rng = Rng::new(3);
        let logits = Tensor::<f64>::uniform(&[4, 7], &mut rng, -2.0, 2.0).unwrap();
        let labels = [0usize, 2, 6, 3];
        let mut tape = Tape::<f64>::recording();
        let lv = grad_leaf(&mut tape, logits.clone());
        let (loss, _) = tape.cross_entropy(&lv, &labels).unwrap();
        let (want, _) = kernels::cross_entropy(&logits, &labels).unwrap();
        assert_eq!(scalar_of(&loss), want);
    }
}
