//! The network: a 34-layer residual backbone whose four stage outputs each
//! pass through a U-shaped attention branch producing a per-element mask in
//! (0, 1). Each stage emits `residual + residual * mask` — features the mask
//! deems important are amplified, none are attenuated — before feeding the
//! next stage. Global average pooling and a linear head produce class logits.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::kernels::conv_out_size;
use crate::rng::Rng;
use crate::tape::{fuse_residual_mask, ParamId, Tape, Value};
use crate::tensor::{c, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch statistics (and update their running
/// estimates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a running-statistics buffer within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

struct ParamEntry<T> {
    name: String,
    tensor: Arc<Tensor<T>>,
}

struct BufferEntry<T> {
    name: String,
    // Interior mutability lets a `&self` training forward pass update running
    // statistics; the lock is uncontended in this single-threaded engine.
    tensor: RwLock<Arc<Tensor<T>>>,
}

/// Owns every tensor of a network: trainable parameters (shared immutably with
/// tapes during forward passes, updated in place between steps) and
/// running-statistics buffers.
pub struct ParamStore<T> {
    params: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
    buffers: Vec<BufferEntry<T>>,
    buf_by_name: HashMap<String, BufferId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            buffers: Vec::new(),
            buf_by_name: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Build(format!("duplicate parameter name: {name}")));
        }
        let id = ParamId(self.params.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.params.push(ParamEntry { name, tensor: Arc::new(t) });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buf_by_name.contains_key(&name) {
            return Err(Error::Build(format!("duplicate buffer name: {name}")));
        }
        let id = BufferId(self.buffers.len());
        self.buf_by_name.insert(name.clone(), id);
        self.buffers.push(BufferEntry { name, tensor: RwLock::new(Arc::new(t)) });
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.params[id.0 as usize].tensor
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0 as usize].name
    }

    pub fn set_param(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        let entry = &mut self.params[id.0 as usize];
        if !entry.tensor.same_shape(&t) {
            return Err(Error::ShapeMismatch(format!(
                "parameter {}: stored {:?}, new {:?}",
                entry.name,
                entry.tensor.shape(),
                t.shape()
            )));
        }
        entry.tensor = Arc::new(t);
        Ok(())
    }

    /// In-place mutable access for optimizer updates. Copies only if a tape
    /// still shares the tensor.
    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0 as usize].tensor)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn buffer(&self, id: BufferId) -> Arc<Tensor<T>> {
        Arc::clone(&self.buffers[id.0].tensor.read().expect("buffer lock poisoned"))
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].name
    }

    pub fn set_buffer(&self, id: BufferId, t: Tensor<T>) {
        *self.buffers[id.0].tensor.write().expect("buffer lock poisoned") = Arc::new(t);
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buf_by_name.get(name).copied()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|i| ParamId(i as u32))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &str, &Arc<Tensor<T>>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e.name.as_str(), &e.tensor))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &str, Arc<Tensor<T>>)> {
        self.buffers.iter().enumerate().map(|(i, e)| {
            (
                BufferId(i),
                e.name.as_str(),
                Arc::clone(&e.tensor.read().expect("buffer lock poisoned")),
            )
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * k * k;
        let w = Tensor::kaiming_normal(&[out_ch, in_ch, k, k], rng, fan_in)?;
        let w = store.add_param(format!("{name}.weight"), w)?;
        let b = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_ch])?)?)
        } else {
            None
        };
        Ok(Conv2d { w, b, stride, pad })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        let w = tape.param(self.w, store.param(self.w));
        let b = self.b.map(|id| tape.param(id, store.param(id)));
        tape.conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }
}

struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    rmean: BufferId,
    rvar: BufferId,
}

impl BatchNorm2d {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[ch])?)?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[ch])?)?,
            rmean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[ch])?)?,
            rvar: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[ch])?)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mode: Mode,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        let gamma = tape.param(self.gamma, store.param(self.gamma));
        let beta = tape.param(self.beta, store.param(self.beta));
        match mode {
            Mode::Train => {
                let (n, _, h, w) = x.data().dims4()?;
                let (y, mean, var) = tape.batchnorm_train(x, &gamma, &beta, BN_EPS)?;
                // Normalization uses the biased variance; the running estimate
                // keeps the unbiased one, matching common framework behaviour.
                let m = (n * h * w) as f64;
                let bessel = c::<T>(m / (m - 1.0));
                let mom = c::<T>(BN_MOMENTUM);
                let keep = T::one() - mom;
                let old_mean = store.buffer(self.rmean);
                let old_var = store.buffer(self.rvar);
                let new_mean: Vec<T> = old_mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&o, &s)| keep * o + mom * s)
                    .collect();
                let new_var: Vec<T> = old_var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&o, &s)| keep * o + mom * s * bessel)
                    .collect();
                store.set_buffer(self.rmean, Tensor::raw(old_mean.shape().to_vec(), new_mean));
                store.set_buffer(self.rvar, Tensor::raw(old_var.shape().to_vec(), new_var));
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.rmean);
                let var = store.buffer(self.rvar);
                tape.batchnorm_eval(x, &gamma, &beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Result<Self> {
        let w = Tensor::kaiming_normal(&[in_f, out_f], rng, in_f)?;
        Ok(Linear {
            w: store.add_param(format!("{name}.weight"), w)?,
            b: store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_f])?)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        let w = tape.param(self.w, store.param(self.w));
        let b = tape.param(self.b, store.param(self.b));
        let y = tape.matmul(x, &w)?;
        tape.add_bias(&y, &b)
    }
}

/// conv3x3 → norm → relu, twice. Used by the attention branches.
struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Ok(DoubleConv {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mode: Mode,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        let mut y = self.conv1.forward(store, tape, x)?;
        y = self.bn1.forward(store, tape, mode, &y)?;
        y = tape.relu(&y)?;
        y = self.conv2.forward(store, tape, &y)?;
        y = self.bn2.forward(store, tape, mode, &y)?;
        tape.relu(&y)
    }
}

/// Two 3x3 convs with a shortcut; the shortcut gets a projection conv when the
/// shape changes.
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let proj = if in_ch != out_ch || stride != 1 {
            let conv =
                Conv2d::new(store, rng, &format!("{name}.proj.conv"), in_ch, out_ch, 1, stride, 0, false)?;
            let bn = BatchNorm2d::new(store, &format!("{name}.proj.bn"), out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
            proj,
        })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mode: Mode,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        let mut y = self.conv1.forward(store, tape, x)?;
        y = self.bn1.forward(store, tape, mode, &y)?;
        y = tape.relu(&y)?;
        y = self.conv2.forward(store, tape, &y)?;
        y = self.bn2.forward(store, tape, mode, &y)?;
        let shortcut = match &self.proj {
            Some((conv, bn)) => {
                let p = conv.forward(store, tape, x)?;
                bn.forward(store, tape, mode, &p)?
            }
            None => x.clone(),
        };
        let s = tape.add(&y, &shortcut)?;
        tape.relu(&s)
    }
}

/// U-shaped attention branch: pool-and-widen `depth` times, then upsample back
/// with skip connections, ending in a 1x1 conv + sigmoid mask over the stage's
/// own channel count.
struct MaskingBlock {
    depth: usize,
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

impl MaskingBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        depth: usize,
    ) -> Result<Self> {
        let width = |lvl: usize| channels << lvl;
        let mut enc = Vec::with_capacity(depth);
        for lvl in 0..depth {
            enc.push(DoubleConv::new(
                store,
                rng,
                &format!("{name}.enc{lvl}"),
                width(lvl),
                width(lvl + 1),
            )?);
        }
        let mut dec = Vec::with_capacity(depth);
        for lvl in 0..depth {
            dec.push(DoubleConv::new(
                store,
                rng,
                &format!("{name}.dec{lvl}"),
                width(lvl + 1) + width(lvl),
                width(lvl),
            )?);
        }
        let head = Conv2d::new(store, rng, &format!("{name}.head"), channels, channels, 1, 1, 0, true)?;
        Ok(MaskingBlock { depth, enc, dec, head })
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mode: Mode,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        // down: keep each resolution's features for the skip connections
        let mut skips: Vec<Value<T>> = vec![x.clone()];
        let mut cur = x.clone();
        for lvl in 0..self.depth {
            let pooled = tape.maxpool2d(&cur, 2, 2, 0)?;
            cur = self.enc[lvl].forward(store, tape, mode, &pooled)?;
            if lvl + 1 < self.depth {
                skips.push(cur.clone());
            }
        }
        // up: widest level first
        for lvl in (0..self.depth).rev() {
            let skip = &skips[lvl];
            let (_, _, th, tw) = skip.data().dims4()?;
            let up = tape.upsample_to(&cur, th, tw)?;
            let cat = tape.concat_channels(&up, skip)?;
            cur = self.dec[lvl].forward(store, tape, mode, &cat)?;
        }
        let logits = self.head.forward(store, tape, &cur)?;
        tape.sigmoid(&logits)
    }
}

struct Stage {
    blocks: Vec<BasicBlock>,
    masking: MaskingBlock,
}

struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
}

// ---------------------------------------------------------------------------
// network spec
// ---------------------------------------------------------------------------

/// One backbone stage plus its attention branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Pooling levels in the attention branch.
    pub masking_depth: usize,
    /// Stride of the stage's first block (1 or 2).
    pub stride: usize,
}

/// Everything needed to build a network deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl NetworkSpec {
    /// The full-size configuration: 224x224 inputs, 34-layer backbone.
    pub fn full() -> Self {
        NetworkSpec {
            input_channels: 3,
            input_size: 224,
            num_classes: 7,
            stem_channels: 64,
            stages: vec![
                StageSpec { channels: 64, blocks: 3, masking_depth: 4, stride: 1 },
                StageSpec { channels: 128, blocks: 4, masking_depth: 3, stride: 2 },
                StageSpec { channels: 256, blocks: 6, masking_depth: 2, stride: 2 },
                StageSpec { channels: 512, blocks: 3, masking_depth: 1, stride: 2 },
            ],
        }
    }

    /// A scaled-down configuration for fast experiments and tests: 64x64
    /// inputs, the same stage layout at an eighth of the width.
    pub fn mini() -> Self {
        NetworkSpec {
            input_channels: 3,
            input_size: 64,
            num_classes: 7,
            stem_channels: 8,
            stages: vec![
                StageSpec { channels: 8, blocks: 3, masking_depth: 2, stride: 1 },
                StageSpec { channels: 16, blocks: 4, masking_depth: 2, stride: 2 },
                StageSpec { channels: 32, blocks: 6, masking_depth: 1, stride: 2 },
                StageSpec { channels: 64, blocks: 3, masking_depth: 1, stride: 2 },
            ],
        }
    }

    /// Spatial size of the stem output (after its strided conv), then of the
    /// pooled input to stage 1.
    fn stem_sizes(&self) -> Result<(usize, usize)> {
        let conv = conv_out_size(self.input_size, 7, 2, 3)?;
        let pool = conv_out_size(conv, 3, 2, 1)?;
        Ok((conv, pool))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 || self.stem_channels == 0 {
            return Err(Error::Build("channels and class count must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Build("at least one stage is required".into()));
        }
        let (_, mut size) = self
            .stem_sizes()
            .map_err(|e| Error::Build(format!("input size {} too small for the stem: {e}", self.input_size)))?;
        for (i, st) in self.stages.iter().enumerate() {
            let label = format!("stage{}", i + 1);
            if st.channels == 0 || st.blocks == 0 {
                return Err(Error::Build(format!("{label}: channels and blocks must be positive")));
            }
            if st.stride != 1 && st.stride != 2 {
                return Err(Error::Build(format!("{label}: stride must be 1 or 2, got {}", st.stride)));
            }
            if st.masking_depth == 0 {
                return Err(Error::Build(format!("{label}: masking depth must be at least 1")));
            }
            size = conv_out_size(size, 3, st.stride, 1)
                .map_err(|e| Error::Build(format!("{label}: {e}")))?;
            let mut s = size;
            for lvl in 0..st.masking_depth {
                s = conv_out_size(s, 2, 2, 0).map_err(|_| {
                    Error::Build(format!(
                        "{label}: masking level {lvl} cannot pool a {s}x{s} map; \
                         reduce masking_depth or enlarge the input"
                    ))
                })?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

/// Activations of one forward pass that callers may need after the logits:
/// saliency mapping differentiates w.r.t. stage activations, inspection prints
/// their shapes.
pub struct ForwardTrace<T> {
    pub logits: Value<T>,
    /// Stem output after its activation, before pooling.
    pub stem: Value<T>,
    /// Stage-1 input (stem after pooling).
    pub pooled: Value<T>,
    /// Per stage: output of the residual blocks (pre-mask).
    pub stage_residual: Vec<Value<T>>,
    /// Per stage: the attention mask, each element in (0, 1).
    pub masks: Vec<Value<T>>,
    /// Per stage: residual + residual * mask — the next stage's input.
    pub stage_fused: Vec<Value<T>>,
    /// Pooled features, shape [batch, channels].
    pub features: Value<T>,
}

/// Breakdown of trainable parameter counts (running statistics excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub backbone: usize,
    pub masking: usize,
    pub masking_per_stage: Vec<usize>,
}

/// One row of the architecture summary: a named activation and its per-sample
/// shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub shape: Vec<usize>,
}

pub struct Network<T> {
    spec: NetworkSpec,
    store: ParamStore<T>,
    stem: Stem,
    stages: Vec<Stage>,
    fc: Linear,
}

/// Build a network with freshly initialized parameters. The same spec and seed
/// always produce bit-identical parameters.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);

    let stem = Stem {
        conv: Conv2d::new(
            &mut store,
            &mut rng,
            "stem.conv",
            spec.input_channels,
            spec.stem_channels,
            7,
            2,
            3,
            true,
        )?,
        bn: BatchNorm2d::new(&mut store, "stem.bn", spec.stem_channels)?,
    };

    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut in_ch = spec.stem_channels;
    for (i, st) in spec.stages.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let mut blocks = Vec::with_capacity(st.blocks);
        for b in 0..st.blocks {
            let stride = if b == 0 { st.stride } else { 1 };
            let block_in = if b == 0 { in_ch } else { st.channels };
            blocks.push(BasicBlock::new(
                &mut store,
                &mut rng,
                &format!("{name}.rl.block{b}"),
                block_in,
                st.channels,
                stride,
            )?);
        }
        let masking = MaskingBlock::new(
            &mut store,
            &mut rng,
            &format!("{name}.mb"),
            st.channels,
            st.masking_depth,
        )?;
        stages.push(Stage { blocks, masking });
        in_ch = st.channels;
    }

    let fc = Linear::new(&mut store, &mut rng, "fc", in_ch, spec.num_classes)?;

    Ok(Network { spec: spec.clone(), store, stem, stages, fc })
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Run the network. `x` must be `[batch, input_channels, size, size]`.
    pub fn forward(&self, tape: &mut Tape<T>, mode: Mode, x: &Value<T>) -> Result<ForwardTrace<T>> {
        let (_, ch, h, w) = x.data().dims4()?;
        if ch != self.spec.input_channels || h != self.spec.input_size || w != self.spec.input_size {
            return Err(Error::InvalidShape(format!(
                "network expects [batch, {}, {}, {}] inputs, got {:?}",
                self.spec.input_channels,
                self.spec.input_size,
                self.spec.input_size,
                x.shape()
            )));
        }
        let store = &self.store;

        let mut cur = self.stem.conv.forward(store, tape, x)?;
        cur = self.stem.bn.forward(store, tape, mode, &cur)?;
        let stem = tape.relu(&cur)?;
        let pooled = tape.maxpool2d(&stem, 3, 2, 1)?;

        let mut stage_residual = Vec::with_capacity(self.stages.len());
        let mut masks = Vec::with_capacity(self.stages.len());
        let mut stage_fused = Vec::with_capacity(self.stages.len());
        let mut cur = pooled.clone();
        for stage in &self.stages {
            for block in &stage.blocks {
                cur = block.forward(store, tape, mode, &cur)?;
            }
            let residual = cur.clone();
            let mask = stage.masking.forward(store, tape, mode, &residual)?;
            let fused = fuse_residual_mask(tape, &residual, &mask)?;
            stage_residual.push(residual);
            masks.push(mask);
            stage_fused.push(fused.clone());
            cur = fused;
        }

        let gap = tape.global_avgpool(&cur)?;
        let (n, c_out, _, _) = gap.data().dims4()?;
        let features = tape.reshape(&gap, &[n, c_out])?;
        let logits = self.fc.forward(store, tape, &features)?;

        Ok(ForwardTrace { logits, stem, pooled, stage_residual, masks, stage_fused, features })
    }

    /// Trainable parameter counts, split between the residual backbone (stem,
    /// blocks, classifier) and the attention branches.
    pub fn count_parameters(&self) -> ParamCounts {
        let mut total = 0usize;
        let mut masking = 0usize;
        let mut per_stage = vec![0usize; self.stages.len()];
        for (_, name, t) in self.store.params() {
            let n = t.numel();
            total += n;
            if let Some(stage_end) = name.find(".mb.") {
                masking += n;
                // names look like "stage3.mb.enc0.conv1.weight"
                if let Some(idx) = name[..stage_end]
                    .strip_prefix("stage")
                    .and_then(|s| s.parse::<usize>().ok())
                {
                    if idx >= 1 && idx <= per_stage.len() {
                        per_stage[idx - 1] += n;
                    }
                }
            }
        }
        ParamCounts { total, backbone: total - masking, masking, masking_per_stage: per_stage }
    }

    /// Architecture summary produced by an actual forward pass on a dummy
    /// input, so the rows cannot drift from the real shapes.
    pub fn describe(&self) -> Result<Vec<LayerRow>> {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros(&[
            1,
            self.spec.input_channels,
            self.spec.input_size,
            self.spec.input_size,
        ])?);
        let trace = self.forward(&mut tape, Mode::Eval, &x)?;
        let chw = |v: &Value<T>| v.shape()[1..].to_vec();
        let mut rows = vec![
            LayerRow { name: "stem".into(), shape: chw(&trace.stem) },
            LayerRow { name: "maxpool".into(), shape: chw(&trace.pooled) },
        ];
        for (i, fused) in trace.stage_fused.iter().enumerate() {
            rows.push(LayerRow { name: format!("stage{}", i + 1), shape: chw(fused) });
        }
        rows.push(LayerRow { name: "avgpool".into(), shape: trace.features.shape()[1..].to_vec() });
        rows.push(LayerRow { name: "fc".into(), shape: trace.logits.shape()[1..].to_vec() });
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_leaf;

    fn micro_spec() -> NetworkSpec {
        // smallest spec that still exercises stride-2 stages, projections and
        // both attention depths
        NetworkSpec {
            input_channels: 3,
            input_size: 16,
            num_classes: 4,
            stem_channels: 4,
            stages: vec![
                StageSpec { channels: 4, blocks: 1, masking_depth: 1, stride: 1 },
                StageSpec { channels: 8, blocks: 1, masking_depth: 1, stride: 2 },
            ],
        }
    }

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("w", Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(store.add_param("w", Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn store_set_param_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add_param("w", Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        assert!(store.set_param(id, Tensor::zeros(&[3, 2]).unwrap()).is_err());
        assert!(store.set_param(id, Tensor::ones(&[2, 3]).unwrap()).is_ok());
        assert_eq!(store.param(id).data(), &[1.0; 6]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network::<f32>(&micro_spec(), 7).unwrap();
        let b = build_network::<f32>(&micro_spec(), 7).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.store.params().zip(b.store.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs between builds");
        }
    }

    #[test]
    fn different_seed_different_parameters() {
        let a = build_network::<f32>(&micro_spec(), 7).unwrap();
        let b = build_network::<f32>(&micro_spec(), 8).unwrap();
        let wa = a.store.param(a.store.find_param("stem.conv.weight").unwrap());
        let wb = b.store.param(b.store.find_param("stem.conv.weight").unwrap());
        assert_ne!(wa.data(), wb.data());
    }

    #[test]
    fn forward_shapes_micro() {
        let net = build_network::<f32>(&micro_spec(), 1).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 16, 16]).unwrap());
        let tr = net.forward(&mut tape, Mode::Eval, &x).unwrap();
        assert_eq!(tr.stem.shape(), &[2, 4, 8, 8]);
        assert_eq!(tr.pooled.shape(), &[2, 4, 4, 4]);
        assert_eq!(tr.stage_fused[0].shape(), &[2, 4, 4, 4]);
        assert_eq!(tr.stage_fused[1].shape(), &[2, 8, 2, 2]);
        assert_eq!(tr.features.shape(), &[2, 8]);
        assert_eq!(tr.logits.shape(), &[2, 4]);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let net = build_network::<f32>(&micro_spec(), 1).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 8, 8]).unwrap());
        assert!(matches!(net.forward(&mut tape, Mode::Eval, &x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn masks_stay_inside_unit_interval() {
        let net = build_network::<f32>(&micro_spec(), 3).unwrap();
        let mut rng = Rng::new(9);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::uniform(&[2, 3, 16, 16], &mut rng, -1.0, 1.0).unwrap());
        let tr = net.forward(&mut tape, Mode::Eval, &x).unwrap();
        for mask in &tr.masks {
            for &m in mask.data().data() {
                assert!(m > 0.0 && m < 1.0, "mask value {m} outside (0,1)");
            }
        }
    }

    #[test]
    fn fused_never_attenuates_residual() {
        let net = build_network::<f32>(&micro_spec(), 4).unwrap();
        let mut rng = Rng::new(10);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::uniform(&[1, 3, 16, 16], &mut rng, -1.0, 1.0).unwrap());
        let tr = net.forward(&mut tape, Mode::Eval, &x).unwrap();
        for (f, r) in tr.stage_fused.iter().zip(&tr.stage_residual) {
            for (&fv, &rv) in f.data().data().iter().zip(r.data().data()) {
                assert!(fv.abs() >= rv.abs() - 1e-6, "fusion attenuated {rv} to {fv}");
            }
        }
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let net = build_network::<f32>(&micro_spec(), 5).unwrap();
        let buf = net.store.find_buffer("stem.bn.running_mean").unwrap();
        let before = net.store.buffer(buf);
        let mut rng = Rng::new(11);
        let xt = Tensor::uniform(&[2, 3, 16, 16], &mut rng, 0.0, 4.0).unwrap();

        let mut tape = Tape::no_grad();
        let x = tape.leaf(xt.clone());
        net.forward(&mut tape, Mode::Eval, &x).unwrap();
        assert_eq!(net.store.buffer(buf).data(), before.data(), "eval must not touch running stats");

        let mut tape = Tape::no_grad();
        let x = tape.leaf(xt);
        net.forward(&mut tape, Mode::Train, &x).unwrap();
        assert_ne!(net.store.buffer(buf).data(), before.data(), "train must update running stats");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = build_network::<f32>(&micro_spec(), 6).unwrap();
        let mut rng = Rng::new(12);
        let xt = Tensor::uniform(&[1, 3, 16, 16], &mut rng, -1.0, 1.0).unwrap();
        let run = |net: &Network<f32>, xt: &Tensor<f32>| {
            let mut tape = Tape::no_grad();
            let x = tape.leaf(xt.clone());
            net.forward(&mut tape, Mode::Eval, &x).unwrap().logits.to_tensor()
        };
        assert_eq!(run(&net, &xt).data(), run(&net, &xt).data());
    }

    #[test]
    fn backward_produces_grad_for_every_parameter() {
        let net = build_network::<f64>(&micro_spec(), 13).unwrap();
        let mut rng = Rng::new(14);
        let mut tape = Tape::recording();
        let x = grad_leaf(&mut tape, Tensor::uniform(&[2, 3, 16, 16], &mut rng, -1.0, 1.0).unwrap());
        let tr = net.forward(&mut tape, Mode::Train, &x).unwrap();
        let (loss, _) = tape.cross_entropy(&tr.logits, &[0, 2]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for (id, name, t) in net.store.params() {
            let g = grads.param(id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert_eq!(g.shape(), t.shape(), "grad shape mismatch for {name}");
            assert!(g.all_finite(), "non-finite grad for {name}");
        }
    }

    #[test]
    fn micro_describe_lists_every_stage_once() {
        let net = build_network::<f32>(&micro_spec(), 2).unwrap();
        let rows = net.describe().unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["stem", "maxpool", "stage1", "stage2", "avgpool", "fc"]);
        assert_eq!(rows.last().unwrap().shape, vec![4]);
    }

    #[test]
    fn mini_parameter_counts_are_frozen() {
        let net = build_network::<f32>(&NetworkSpec::mini(), 1).unwrap();
        let counts = net.count_parameters();
        assert_eq!(counts.backbone, 335_927);
        assert_eq!(counts.masking_per_stage, vec![29_160, 116_048, 93_600, 373_568]);
        assert_eq!(counts.masking, 612_376);
        assert_eq!(counts.total, 948_303);
    }

    #[test]
    fn mini_describe_shapes_are_frozen() {
        let net = build_network::<f32>(&NetworkSpec::mini(), 1).unwrap();
        let rows = net.describe().unwrap();
        let get = |n: &str| rows.iter().find(|r| r.name == n).unwrap().shape.clone();
        assert_eq!(get("stem"), vec![8, 32, 32]);
        assert_eq!(get("maxpool"), vec![8, 16, 16]);
        assert_eq!(get("stage1"), vec![8, 16, 16]);
        assert_eq!(get("stage2"), vec![16, 8, 8]);
        assert_eq!(get("stage3"), vec![32, 4, 4]);
        assert_eq!(get("stage4"), vec![64, 2, 2]);
        assert_eq!(get("avgpool"), vec![64]);
        assert_eq!(get("fc"), vec![7]);
    }

    #[test]
    #[ignore = "builds the 137M-parameter network; run explicitly"]
    fn full_parameter_counts_are_frozen() {
        let net = build_network::<f32>(&NetworkSpec::full(), 1).unwrap();
        let counts = net.count_parameters();
        assert_eq!(counts.backbone, 21_288_327);
        assert_eq!(
            counts.masking_per_stage,
            vec![31_350_080, 30_993_024, 29_566_208, 23_861_760]
        );
        assert_eq!(counts.masking, 115_771_072);
        assert_eq!(counts.total, 137_059_399);
    }

    #[test]
    fn spec_with_oversized_masking_depth_is_rejected() {
        let mut spec = micro_spec();
        spec.stages[1].masking_depth = 3; // stage2 maps are 2x2: one pool only
        let err = match build_network::<f32>(&spec, 1) {
            Err(e) => e,
            Ok(_) => panic!("oversized masking depth must be rejected"),
        };
        assert!(matches!(err, Error::Build(_)), "{err}");
    }

    #[test]
    fn spec_with_bad_stride_is_rejected() {
        let mut spec = micro_spec();
        spec.stages[0].stride = 3;
        assert!(build_network::<f32>(&spec, 1).is_err());
    }
}
