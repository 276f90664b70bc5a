//! Building blocks of the decoder network.
//!
//! Parameters live in a [`ParamStore`] under stable hierarchical names and
//! are bound onto a fresh tape per forward pass through [`Forward`], which
//! also carries batch-norm running statistics, the train/eval mode and the
//! dropout counters. Blocks are pure functions of (input, bound params,
//! mode); parameter mutation happens only in the optimizer.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fnv1a64, RngStream};
use crate::scalar::Scalar;
use crate::tensor::{finite_diff_check, Mode, OpCheck, Tape, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Error, Debug)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// In-block normalization. Batch normalization (per channel over batch and
/// time, running statistics for evaluation) is the only v1 implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
}

impl Activation {
    fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform with fan-in scaling (bound √(6/fan_in)).
    KaimingUniform,
    Zeros,
}

// ── Parameter store ──────────────────────────────────────────────────

/// Named parameter tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    entries: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, NnError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Initialize a tensor parameter from its own named stream, so values do
    /// not depend on registration order.
    pub fn register_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        fan_in: usize,
        seed: u64,
    ) -> Result<(), NnError> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = RngStream::new(seed, &format!("init.{name}"));
                Tensor::rand_uniform(shape, -bound, bound, &mut rng)
            }
        };
        self.insert(name, t)
    }
}

/// Running mean/variance for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStat<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Batch-norm running statistics, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormState<S: Scalar> {
    entries: IndexMap<String, RunningStat<S>>,
}

impl<S: Scalar> NormState<S> {
    pub fn new() -> Self {
        NormState {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, channels: usize) {
        self.entries.insert(
            name.to_string(),
            RunningStat {
                mean: vec![S::zero(); channels],
                var: vec![S::one(); channels],
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&RunningStat<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RunningStat<S>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RunningStat<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut RunningStat<S>)> {
        self.entries.iter_mut()
    }
}

// ── Forward context ──────────────────────────────────────────────────

/// Per-pass context: the tape, parameter bindings, norm state, mode and
/// dropout counters.
pub struct Forward<'t, 'n, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    bindings: HashMap<String, Var>,
    norm: &'n mut NormState<S>,
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
    pub dropout_p: f64,
}

impl<'t, 'n, S: Scalar> Forward<'t, 'n, S> {
    pub fn new(
        tape: &'t mut Tape<S>,
        params: &ParamStore<S>,
        norm: &'n mut NormState<S>,
        mode: Mode,
        seed: u64,
        step: u64,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        let mut fw = Forward {
            tape,
            bindings: HashMap::new(),
            norm,
            mode,
            seed,
            step,
            dropout_p,
        };
        for (name, t) in params.iter() {
            let v = fw.tape.leaf(t.clone().with_grad());
            fw.bindings.insert(name.clone(), v);
        }
        Ok(fw)
    }

    /// Bind every parameter as a slice of one flat leaf (store order). Used
    /// by the end-to-end finite-difference check so all parameters can be
    /// probed as a single vector.
    pub fn from_packed(
        tape: &'t mut Tape<S>,
        params: &ParamStore<S>,
        packed: Var,
        norm: &'n mut NormState<S>,
        mode: Mode,
        seed: u64,
        step: u64,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        let mut bindings = HashMap::new();
        let mut offset = 0usize;
        for (name, t) in params.iter() {
            let n = t.numel();
            let flat = tape.narrow(packed, 0, offset, n)?;
            let shaped = tape.reshape(flat, t.shape())?;
            bindings.insert(name.clone(), shaped);
            offset += n;
        }
        Ok(Forward {
            tape,
            bindings,
            norm,
            mode,
            seed,
            step,
            dropout_p,
        })
    }

    pub fn param(&self, name: &str) -> Result<Var, NnError> {
        self.bindings
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Gradient of a bound parameter after backward, if any flowed.
    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.bindings.get(name).and_then(|&v| self.tape.grad(v))
    }

    fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var, NnError> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let stat = self
            .norm
            .get_mut(name)
            .ok_or_else(|| NnError::Invalid(format!("no running stats for '{name}'")))?;
        Ok(self.tape.batch_norm(
            x,
            gamma,
            beta,
            &mut stat.mean,
            &mut stat.var,
            self.mode,
            BN_MOMENTUM,
            BN_EPS,
        )?)
    }

    /// Dropout whose mask is keyed by the layer name (hashed), the pass
    /// seed, the step counter and the element index.
    pub fn dropout_named(&mut self, layer: &str, x: Var) -> Result<Var, NnError> {
        Ok(self.tape.dropout(
            x,
            self.dropout_p,
            self.seed,
            fnv1a64(layer.as_bytes()),
            self.step,
            self.mode,
        )?)
    }

    pub fn into_bindings(self) -> HashMap<String, Var> {
        self.bindings
    }
}

/// Flatten all parameters into one vector tensor, store order.
pub fn pack_params<S: Scalar>(ps: &ParamStore<S>) -> Tensor<S> {
    let mut data = Vec::with_capacity(ps.total_scalars());
    for (_, t) in ps.iter() {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![data.len()], data).expect("non-empty store")
}

// ── Primitive layers ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub groups: usize,
    pub init: Init,
    pub bias: bool,
}

impl Conv1dLayer {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, dilation: usize, groups: usize) -> Self {
        Conv1dLayer {
            name: name.to_string(),
            c_in,
            c_out,
            k,
            dilation,
            groups,
            init: Init::KaimingUniform,
            bias: true,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    /// Convolutions feeding straight into batch norm or a softmax drop their
    /// bias: a per-channel constant is cancelled there, leaving the bias
    /// with a structurally zero gradient.
    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register<S: Scalar>(&self, ps: &mut ParamStore<S>, seed: u64) -> Result<(), NnError> {
        let cig = self.c_in / self.groups;
        ps.register_init(
            &format!("{}.weight", self.name),
            &[self.c_out, cig, self.k],
            self.init,
            cig * self.k,
            seed,
        )?;
        if self.bias {
            ps.register_init(&format!("{}.bias", self.name), &[self.c_out], Init::Zeros, 1, seed)?;
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, x: Var) -> Result<Var, NnError> {
        let w = fw.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(fw.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        Ok(fw.tape.conv1d(x, w, b, self.dilation, self.groups)?)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.k + if self.bias { self.c_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub init: Init,
    pub bias: bool,
}

impl LinearLayer {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Self {
        LinearLayer {
            name: name.to_string(),
            in_features,
            out_features,
            init: Init::KaimingUniform,
            bias: true,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register<S: Scalar>(&self, ps: &mut ParamStore<S>, seed: u64) -> Result<(), NnError> {
        ps.register_init(
            &format!("{}.weight", self.name),
            &[self.in_features, self.out_features],
            self.init,
            self.in_features,
            seed,
        )?;
        if self.bias {
            ps.register_init(
                &format!("{}.bias", self.name),
                &[self.out_features],
                Init::Zeros,
                1,
                seed,
            )?;
        }
        Ok(())
    }

    /// `x @ W + b` for `x: [B, in]`.
    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, x: Var) -> Result<Var, NnError> {
        let w = fw.param(&format!("{}.weight", self.name))?;
        let y = fw.tape.matmul(x, w)?;
        if self.bias {
            let b = fw.param(&format!("{}.bias", self.name))?;
            Ok(fw.tape.add(y, b)?)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias { self.out_features } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            channels,
        }
    }

    pub fn register<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        norm: &mut NormState<S>,
    ) -> Result<(), NnError> {
        ps.insert(
            &format!("{}.gamma", self.name),
            Tensor::full(&[self.channels], S::one()),
        )?;
        ps.insert(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]))?;
        norm.register(&self.name, self.channels);
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, x: Var) -> Result<Var, NnError> {
        fw.batch_norm(&self.name, x)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

// ── Architecture blocks ──────────────────────────────────────────────

/// Sensor re-weighting: time-mean → learned logit map → softmax over sensors
/// scaled by the sensor count (uniform attention is then an identity weight)
/// → pointwise projection to D channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub c_in: usize,
    pub d: usize,
    logit: LinearLayer,
    proj: Conv1dLayer,
}

impl SpatialAttention {
    pub fn new(c_in: usize, d: usize) -> Self {
        SpatialAttention {
            c_in,
            d,
            logit: LinearLayer::new("spatial.logit", c_in, c_in).zero_init().no_bias(),
            proj: Conv1dLayer::new("spatial.proj", c_in, d, 1, 1, 1),
        }
    }

    pub fn register<S: Scalar>(&self, ps: &mut ParamStore<S>, seed: u64) -> Result<(), NnError> {
        self.logit.register(ps, seed)?;
        self.proj.register(ps, seed)
    }

    /// Per-sensor weights `[B, C]`; they sum to `c_in` per sample.
    pub fn sensor_weights<S: Scalar>(&self, fw: &mut Forward<S>, x: Var) -> Result<Var, NnError> {
        if fw.tape.shape(x).len() != 3 || fw.tape.shape(x)[1] != self.c_in {
            return Err(NnError::Invalid(format!(
                "spatial attention expects [B, {}, T], got {:?}",
                self.c_in,
                fw.tape.shape(x)
            )));
        }
        let m = fw.tape.mean_axis(x, 2, false)?;
        let logits = self.logit.forward(fw, m)?;
        let sm = fw.tape.softmax(logits, 1)?;
        Ok(fw.tape.scale(sm, S::from_f64(self.c_in as f64))?)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, x: Var) -> Result<Var, NnError> {
        let w = self.sensor_weights(fw, x)?;
        let batch = fw.tape.shape(x)[0];
        let w3 = fw.tape.reshape(w, &[batch, self.c_in, 1])?;
        let xw = fw.tape.mul(x, w3)?;
        self.proj.forward(fw, xw)
    }

    pub fn param_count(&self) -> usize {
        self.logit.param_count() + self.proj.param_count()
    }
}

/// Three parallel convolutions (K ∈ {3,5,7}, shared per-block dilation
/// 2^(b mod 3)) summed, normalized, activated, with a residual connection.
#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    pub index: usize,
    convs: Vec<Conv1dLayer>,
    bn: BatchNormLayer,
    activation: Activation,
}

impl MultiScaleBlock {
    pub const KERNELS: [usize; 3] = [3, 5, 7];

    pub fn dilation(index: usize) -> usize {
        1 << (index % 3)
    }

    pub fn new(index: usize, d: usize, activation: Activation) -> Self {
        let dil = Self::dilation(index);
        let convs = Self::KERNELS
            .iter()
            .map(|&k| Conv1dLayer::new(&format!("ms{index}.k{k}"), d, d, k, dil, 1).no_bias())
            .collect();
        MultiScaleBlock {
            index,
            convs,
            bn: BatchNormLayer::new(&format!("ms{index}.bn"), d),
            activation,
        }
    }

    pub fn register<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        norm: &mut NormState<S>,
        seed: u64,
    ) -> Result<(), NnError> {
        for c in &self.convs {
            c.register(ps, seed)?;
        }
        self.bn.register(ps, norm)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, h: Var) -> Result<Var, NnError> {
        let mut acc = self.convs[0].forward(fw, h)?;
        for c in &self.convs[1..] {
            let branch = c.forward(fw, h)?;
            acc = fw.tape.add(acc, branch)?;
        }
        let n = self.bn.forward(fw, acc)?;
        let a = self.activation.apply(fw.tape, n)?;
        Ok(fw.tape.add(a, h)?)
    }

    /// Receptive-field growth contributed by this block: (K_max−1)·dilation.
    pub fn receptive_growth(&self) -> usize {
        (Self::KERNELS[2] - 1) * Self::dilation(self.index)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>() + self.bn.param_count()
    }
}

/// Residual encoder: two dilated K=3 convolutions with norm/activation, a
/// 1×1 expansion to 2D and a gated linear unit back to D. Dilations double
/// per convolution, wrapping after 32: 2^((2b) mod 6) and 2^((2b+1) mod 6).
#[derive(Clone, Debug)]
pub struct BmEncoderBlock {
    pub index: usize,
    pub d: usize,
    conv1: Conv1dLayer,
    bn1: BatchNormLayer,
    conv2: Conv1dLayer,
    bn2: BatchNormLayer,
    expand: Conv1dLayer,
    activation: Activation,
}

impl BmEncoderBlock {
    pub fn dilations(index: usize) -> (usize, usize) {
        (1 << ((2 * index) % 6), 1 << ((2 * index + 1) % 6))
    }

    pub fn new(index: usize, d: usize, activation: Activation) -> Self {
        let (d1, d2) = Self::dilations(index);
        BmEncoderBlock {
            index,
            d,
            conv1: Conv1dLayer::new(&format!("bm{index}.conv1"), d, d, 3, d1, 1).no_bias(),
            bn1: BatchNormLayer::new(&format!("bm{index}.bn1"), d),
            conv2: Conv1dLayer::new(&format!("bm{index}.conv2"), d, d, 3, d2, 1).no_bias(),
            bn2: BatchNormLayer::new(&format!("bm{index}.bn2"), d),
            expand: Conv1dLayer::new(&format!("bm{index}.expand"), d, 2 * d, 1, 1, 1),
            activation,
        }
    }

    pub fn register<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        norm: &mut NormState<S>,
        seed: u64,
    ) -> Result<(), NnError> {
        self.conv1.register(ps, seed)?;
        self.bn1.register(ps, norm)?;
        self.conv2.register(ps, seed)?;
        self.bn2.register(ps, norm)?;
        self.expand.register(ps, seed)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, h: Var) -> Result<Var, NnError> {
        let c1 = self.conv1.forward(fw, h)?;
        let n1 = self.bn1.forward(fw, c1)?;
        let a1 = self.activation.apply(fw.tape, n1)?;
        let c2 = self.conv2.forward(fw, a1)?;
        let n2 = self.bn2.forward(fw, c2)?;
        let a2 = self.activation.apply(fw.tape, n2)?;
        let wide = self.expand.forward(fw, a2)?;
        // gated linear unit over the channel split
        let value = fw.tape.narrow(wide, 1, 0, self.d)?;
        let gate = fw.tape.narrow(wide, 1, self.d, self.d)?;
        let sg = fw.tape.sigmoid(gate)?;
        let gated = fw.tape.mul(value, sg)?;
        Ok(fw.tape.add(gated, h)?)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.expand.param_count()
    }
}

/// Depthwise separable fusion: per-channel K=3 convolution, then a pointwise
/// projection to D, batch norm and activation.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    pub c_in: usize,
    pub d: usize,
    depthwise: Conv1dLayer,
    pointwise: Conv1dLayer,
    bn: BatchNormLayer,
    activation: Activation,
}

impl FuseBlock {
    pub fn new(c_in: usize, d: usize, activation: Activation) -> Self {
        FuseBlock {
            c_in,
            d,
            depthwise: Conv1dLayer::new("fuse.dw", c_in, c_in, 3, 1, c_in).no_bias(),
            pointwise: Conv1dLayer::new("fuse.pw", c_in, d, 1, 1, 1).no_bias(),
            bn: BatchNormLayer::new("fuse.bn", d),
            activation,
        }
    }

    pub fn register<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        norm: &mut NormState<S>,
        seed: u64,
    ) -> Result<(), NnError> {
        self.depthwise.register(ps, seed)?;
        self.pointwise.register(ps, seed)?;
        self.bn.register(ps, norm)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, h: Var) -> Result<Var, NnError> {
        if fw.tape.shape(h)[1] != self.c_in {
            return Err(NnError::Invalid(format!(
                "fusion expects {} channels, got {:?}",
                self.c_in,
                fw.tape.shape(h)
            )));
        }
        let dw = self.depthwise.forward(fw, h)?;
        let pw = self.pointwise.forward(fw, dw)?;
        let n = self.bn.forward(fw, pw)?;
        Ok(self.activation.apply(fw.tape, n)?)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count() + self.bn.param_count()
    }
}

/// Convolutional attention pooling: 1×1 convolution to one channel, softmax
/// over time, reweight, sum over time.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub d: usize,
    score: Conv1dLayer,
}

impl AttentionPool {
    pub fn new(d: usize) -> Self {
        AttentionPool {
            d,
            score: Conv1dLayer::new("pool.score", d, 1, 1, 1, 1).zero_init().no_bias(),
        }
    }

    pub fn register<S: Scalar>(&self, ps: &mut ParamStore<S>, seed: u64) -> Result<(), NnError> {
        self.score.register(ps, seed)
    }

    /// Attention weights over time, `[B, 1, T]`, summing to 1 per sample.
    pub fn weights<S: Scalar>(&self, fw: &mut Forward<S>, h: Var) -> Result<Var, NnError> {
        let a = self.score.forward(fw, h)?;
        Ok(fw.tape.softmax(a, 2)?)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<S>, h: Var) -> Result<Var, NnError> {
        let w = self.weights(fw, h)?;
        let reweighted = fw.tape.mul(h, w)?;
        Ok(fw.tape.sum_axis(reweighted, 2, false)?)
    }

    pub fn param_count(&self) -> usize {
        self.score.param_count()
    }
}

/// Affine map to class logits; probabilities come from a softmax over them.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    linear: LinearLayer,
}

impl ClassifierHead {
    pub fn new(d: usize, n_classes: usize) -> Self {
        ClassifierHead {
            linear: LinearLayer::new("head", d, n_classes),
        }
    }

    pub fn register<S: Scalar>(&self, ps: &mut ParamStore<S>, seed: u64) -> Result<(), NnError> {
        self.linear.register(ps, seed)
    }

    pub fn logits<S: Scalar>(&self, fw: &mut Forward<S>, z: Var) -> Result<Var, NnError> {
        self.linear.forward(fw, z)
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count()
    }
}

// ── Block-level gradient checks ──────────────────────────────────────

/// Finite-difference checks of each block's composed forward with respect to
/// its input, at f64 on tiny shapes. Returns one entry per block.
pub fn block_gradchecks(seed: u64) -> Vec<OpCheck> {
    use crate::tensor::OP_TOLERANCE;

    let mut rng = RngStream::new(seed, "gradcheck.blocks");
    let mut checks = Vec::new();
    let (b, c_in, d, t) = (2usize, 5usize, 4usize, 9usize);

    let mut check_block =
        |name: &str,
         rng: &mut RngStream,
         build: &dyn Fn(&mut ParamStore<f64>, &mut NormState<f64>, u64) -> Result<(), NnError>,
         run: Box<dyn Fn(&mut Forward<f64>, Var) -> Result<Var, NnError>>,
         in_shape: &[usize]| {
            let mut ps = ParamStore::<f64>::new();
            let mut norm = NormState::new();
            build(&mut ps, &mut norm, seed).expect("register");
            // randomize zero-initialized params so the check is not trivial
            let mut init_rng = RngStream::new(seed, &format!("gradcheck.blocks.{name}"));
            for (_, tensor) in ps.iter_mut() {
                for v in tensor.data_mut() {
                    if *v == 0.0 {
                        *v = init_rng.uniform_in(-0.4, 0.4);
                    }
                }
            }
            let scale = rng.uniform_in(0.5, 1.5);
            let x = Tensor::<f64>::rand_uniform(in_shape, -1.0, 1.0, rng);
            let mut worst = 0.0f64;
            for mode in [Mode::Eval, Mode::Train] {
                let norm_snapshot = norm.clone();
                let ps_ref = &ps;
                let run_ref = &run;
                let err = finite_diff_check(
                    |tape, xv| {
                        let mut local_norm = norm_snapshot.clone();
                        let mut fw =
                            Forward::new(tape, ps_ref, &mut local_norm, mode, seed, 0, 0.02)
                                .map_err(|e| TensorError::Invalid {
                                    op: "block",
                                    msg: e.to_string(),
                                })?;
                        let y = run_ref(&mut fw, xv).map_err(|e| TensorError::Invalid {
                            op: "block",
                            msg: e.to_string(),
                        })?;
                        let s = fw.tape.sum_all(y)?;
                        fw.tape.scale(s, scale)
                    },
                    &x,
                    1e-5,
                )
                .unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            checks.push(OpCheck::from_err(name, worst, OP_TOLERANCE));
        };

    let spatial = SpatialAttention::new(c_in, d);
    {
        let sp = spatial.clone();
        check_block(
            "spatial_attention",
            &mut rng,
            &|ps, _norm, seed| sp.register(ps, seed),
            Box::new({
                let sp = spatial.clone();
                move |fw, x| sp.forward(fw, x)
            }),
            &[b, c_in, t],
        );
    }

    let ms = MultiScaleBlock::new(1, d, Activation::Gelu);
    {
        let blk = ms.clone();
        check_block(
            "multiscale_block",
            &mut rng,
            &|ps, norm, seed| blk.register(ps, norm, seed),
            Box::new({
                let blk = ms.clone();
                move |fw, x| blk.forward(fw, x)
            }),
            &[b, d, t],
        );
    }

    let bm = BmEncoderBlock::new(0, d, Activation::Gelu);
    {
        let blk = bm.clone();
        check_block(
            "bm_encoder",
            &mut rng,
            &|ps, norm, seed| blk.register(ps, norm, seed),
            Box::new({
                let blk = bm.clone();
                move |fw, x| blk.forward(fw, x)
            }),
            &[b, d, t],
        );
    }

    let fuse = FuseBlock::new(2 * d, d, Activation::Gelu);
    {
        let blk = fuse.clone();
        check_block(
            "depthwise_separable_fuse",
            &mut rng,
            &|ps, norm, seed| blk.register(ps, norm, seed),
            Box::new({
                let blk = fuse.clone();
                move |fw, x| blk.forward(fw, x)
            }),
            &[b, 2 * d, t],
        );
    }

    let pool = AttentionPool::new(d);
    {
        let blk = pool.clone();
        check_block(
            "conv_attention_pool",
            &mut rng,
            &|ps, _norm, seed| blk.register(ps, seed),
            Box::new({
                let blk = pool.clone();
                move |fw, x| blk.forward(fw, x)
            }),
            &[b, d, t],
        );
    }

    let head = ClassifierHead::new(d, 5);
    {
        let blk = head.clone();
        check_block(
            "classifier_head",
            &mut rng,
            &|ps, _norm, seed| blk.register(ps, seed),
            Box::new({
                let blk = head.clone();
                move |fw, x| blk.logits(fw, x)
            }),
            &[b, d],
        );
    }

    checks
}
