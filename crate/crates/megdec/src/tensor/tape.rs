//! Wengert tape: records forward operations, replays them in reverse.
//!
//! Leaves enter via [`Tape::leaf`]; every op validates its inputs, computes
//! the forward value, checks it for non-finite entries and (while recording)
//! pushes a record. [`Tape::backward`] walks the records once in reverse
//! execution order and accumulates gradients into `requires_grad` leaves;
//! repeated backward calls accumulate additively.

use rayon::prelude::*;

use super::kernels::{self, ConvMeta};
use super::{
    broadcast_map, broadcast_shape, ensure_finite, reduce_to_shape, Tensor, TensorError,
};
use crate::rng::counter_uniform;
use crate::scalar::Scalar;

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward mode: training enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub enum UnKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Gelu,
}

/// One recorded differentiable operation.
pub enum Op<S: Scalar> {
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        out: Var,
    },
    Unary {
        kind: UnKind,
        x: Var,
        out: Var,
    },
    Scale {
        x: Var,
        c: S,
        out: Var,
    },
    AddScalar {
        x: Var,
        out: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        out: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        out: Var,
        meta: ConvMeta,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        mean: Vec<f64>,
        istd: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Var,
        out: Var,
        seed: u64,
        layer: u64,
        step: u64,
        p: f64,
    },
    Softmax {
        x: Var,
        out: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        out: Var,
        axis: usize,
        keepdim: bool,
    },
    SumAll {
        x: Var,
        out: Var,
    },
    Reshape {
        x: Var,
        out: Var,
    },
    Narrow {
        x: Var,
        out: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        a: Var,
        b: Var,
        out: Var,
        axis: usize,
    },
    WeightedCeLogits {
        logits: Var,
        out: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    WeightedCeProbs {
        probs: Var,
        out: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    is_leaf: Vec<bool>,
    ops: Vec<Op<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            is_leaf: Vec::new(),
            ops: Vec::new(),
            recording: true,
        }
    }

    /// A tape that computes forward values but records nothing; `backward`
    /// is unavailable. Used for evaluation passes.
    pub fn forward_only() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── Node management ──────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(t);
        self.is_leaf.push(true);
        Var(id)
    }

    /// Leaf from a borrowed slice (snapshots the data).
    pub fn leaf_slice(
        &mut self,
        shape: &[usize],
        data: &[S],
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let mut t = Tensor::new(shape.to_vec(), data.to_vec())?;
        if requires_grad {
            t = t.with_grad();
        }
        Ok(self.leaf(t))
    }

    fn push_output(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        ensure_finite(op, &data)?;
        let t = Tensor::new(shape, data)?;
        let id = self.nodes.len();
        self.nodes.push(if requires_grad { t.with_grad() } else { t });
        self.is_leaf.push(false);
        Ok(Var(id))
    }

    fn record(&mut self, op: Op<S>) {
        if self.recording {
            self.ops.push(op);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0]
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.clear_grad();
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let f = match kind {
            BinKind::Add => |x: S, y: S| x + y,
            BinKind::Sub => |x: S, y: S| x - y,
            BinKind::Mul => |x: S, y: S| x * y,
            BinKind::Div => |x: S, y: S| x / y,
        };
        let data = broadcast_map(self.data(a), &sa, self.data(b), &sb, &out_shape, f);
        let rg = self.rg(a) || self.rg(b);
        let out = self.push_output(name, out_shape, data, rg)?;
        self.record(Op::Binary { kind, a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, "add", a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, "sub", a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, "mul", a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, "div", a, b)
    }

    fn unary(&mut self, kind: UnKind, name: &'static str, x: Var) -> Result<Var, TensorError> {
        let f = |v: S| -> S {
            match kind {
                UnKind::Neg => -v,
                UnKind::Exp => v.exp(),
                UnKind::Log => v.ln(),
                UnKind::Sigmoid => S::one() / (S::one() + (-v).exp()),
                UnKind::Relu => {
                    if v > S::zero() {
                        v
                    } else {
                        S::zero()
                    }
                }
                UnKind::Gelu => gelu(v),
            }
        };
        let data: Vec<S> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let out = self.push_output(name, shape, data, rg)?;
        self.record(Op::Unary { kind, x, out });
        Ok(out)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Neg, "neg", x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Exp, "exp", x)
    }
    /// Errors on nonpositive operands (the non-finite check catches them).
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Log, "log", x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Sigmoid, "sigmoid", x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Relu, "relu", x)
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Gelu, "gelu", x)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        let data: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let out = self.push_output("scale", shape, data, rg)?;
        self.record(Op::Scale { x, c, out });
        Ok(out)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        let data: Vec<S> = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let out = self.push_output("add_scalar", shape, data, rg)?;
        self.record(Op::AddScalar { x, out });
        Ok(out)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), &mut data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        let out = self.push_output("matmul", vec![m, n], data, rg)?;
        self.record(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// Same-padding 1D convolution over `[B, C_in, T]` with odd kernel size.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(TensorError::Conv(format!(
                "expected x rank 3 and w rank 3, got {sx:?} and {sw:?}"
            )));
        }
        let (batch, c_in, t) = (sx[0], sx[1], sx[2]);
        let (c_out, cig, k) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(TensorError::Conv(format!(
                "even kernel size {k} has no symmetric same-padding"
            )));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(TensorError::Conv(format!(
                "channels ({c_in} in, {c_out} out) must be divisible by groups ({groups})"
            )));
        }
        if cig != c_in / groups {
            return Err(TensorError::Conv(format!(
                "weight expects {cig} channels per group, input provides {}",
                c_in / groups
            )));
        }
        // Same padding with stride 1: the effective kernel (K−1)·d+1 always
        // fits T + (K−1)·d total padding, so only dilation 0 is ruled out.
        if dilation == 0 {
            return Err(TensorError::Conv("dilation must be >= 1".into()));
        }
        if let Some(bv) = bias {
            let sb = self.shape(bv);
            if sb != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: sb.to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let meta = ConvMeta {
            batch,
            c_in,
            c_out,
            t,
            k,
            dilation,
            groups,
        };
        let data = kernels::conv1d_forward(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            &meta,
        );
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let out = self.push_output("conv1d", vec![batch, c_out, t], data, rg)?;
        self.record(Op::Conv1d {
            x,
            w,
            bias,
            out,
            meta,
        });
        Ok(out)
    }

    /// Batch normalization over `[B, C, T]`, statistics per channel across
    /// (batch, time). Training mode uses batch statistics and updates the
    /// running buffers; eval mode normalizes with the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("expected rank-3 input, got {sx:?}"),
            });
        }
        let (batch, c, t) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("affine/running buffers must have {c} channels"),
            });
        }
        let n = (batch * t) as f64;
        let training = mode.is_train();
        if training && n < 2.0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "training mode needs at least 2 values per channel".into(),
            });
        }

        let (mean, istd): (Vec<f64>, Vec<f64>) = if training {
            let stats: Vec<(f64, f64)> = (0..c)
                .into_par_iter()
                .map(|ch| kernels::channel_mean_var(self.data(x), batch, c, t, ch))
                .collect();
            for (ch, &(m, v)) in stats.iter().enumerate() {
                let rm = running_mean[ch].as_f64();
                let rv = running_var[ch].as_f64();
                running_mean[ch] = S::from_f64((1.0 - momentum) * rm + momentum * m);
                // running variance stored unbiased, PyTorch-style
                running_var[ch] =
                    S::from_f64((1.0 - momentum) * rv + momentum * v * n / (n - 1.0));
            }
            stats
                .into_iter()
                .map(|(m, v)| (m, 1.0 / (v + eps).sqrt()))
                .unzip()
        } else {
            (0..c)
                .map(|ch| {
                    (
                        running_mean[ch].as_f64(),
                        1.0 / (running_var[ch].as_f64() + eps).sqrt(),
                    )
                })
                .unzip()
        };

        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![S::zero(); xd.len()];
        data.par_chunks_mut(t).enumerate().for_each(|(row, orow)| {
            let ch = row % c;
            let g = S::from_f64(gd[ch].as_f64() * istd[ch]);
            let shift = S::from_f64(bd[ch].as_f64() - gd[ch].as_f64() * istd[ch] * mean[ch]);
            let xrow = &xd[row * t..(row + 1) * t];
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = g * v + shift;
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push_output("batch_norm", sx, data, rg)?;
        self.record(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean,
            istd,
            training,
        });
        Ok(out)
    }

    /// Counter-based dropout: the mask is a pure function of
    /// `(seed, layer, step, element index)`. Identity in eval mode or at p=0.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        seed: u64,
        layer: u64,
        step: u64,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        if !mode.is_train() || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let data: Vec<S> = self
            .data(x)
            .par_iter()
            .enumerate()
            .map(|(i, &v)| {
                if counter_uniform(seed, layer, step, i as u64) < p {
                    S::zero()
                } else {
                    v * keep_scale
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let out = self.push_output("dropout", shape, data, rg)?;
        self.record(Op::Dropout {
            x,
            out,
            seed,
            layer,
            step,
            p,
        });
        Ok(out)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut data = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut mx = S::neg_infinity();
                for a in 0..extent {
                    mx = mx.max(xd[base + a * inner]);
                }
                let mut sum = 0.0f64;
                for a in 0..extent {
                    let e = (xd[base + a * inner] - mx).exp();
                    data[base + a * inner] = e;
                    sum += e.as_f64();
                }
                let inv = S::from_f64(1.0 / sum);
                for a in 0..extent {
                    data[base + a * inner] = data[base + a * inner] * inv;
                }
            }
        }
        let rg = self.rg(x);
        let out = self.push_output("softmax", shape, data, rg)?;
        self.record(Op::Softmax { x, out, axis });
        Ok(out)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &xd[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                let dst = &mut acc[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s.as_f64();
                }
            }
        }
        let data: Vec<S> = acc.into_iter().map(S::from_f64).collect();
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.rg(x);
        let out = self.push_output("sum_axis", out_shape, data, rg)?;
        self.record(Op::SumAxis {
            x,
            out,
            axis,
            keepdim,
        });
        Ok(out)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or(TensorError::InvalidAxis {
                op: "mean_axis",
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, S::from_f64(1.0 / extent as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = kernels::sum_f64(self.data(x));
        let rg = self.rg(x);
        let out = self.push_output("sum_all", vec![1], vec![S::from_f64(total)], rg)?;
        self.record(Op::SumAll { x, out });
        Ok(out)
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        let out = self.push_output("reshape", new_shape.to_vec(), data, rg)?;
        self.record(Op::Reshape { x, out });
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range [{start}, {}) out of bounds for extent {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * extent + start) * inner..(o * extent + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        let out = self.push_output("narrow", out_shape, data, rg)?;
        self.record(Op::Narrow {
            x,
            out,
            axis,
            start,
            len,
        });
        Ok(out)
    }

    /// Concatenate two tensors along `axis`; all other extents must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, ea, inner) = split_axis(&sa, axis);
        let eb = sb[axis];
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![S::zero(); outer * (ea + eb) * inner];
        for o in 0..outer {
            let dst = &mut data[o * (ea + eb) * inner..(o + 1) * (ea + eb) * inner];
            dst[..ea * inner].copy_from_slice(&da[o * ea * inner..(o + 1) * ea * inner]);
            dst[ea * inner..].copy_from_slice(&db[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = ea + eb;
        let rg = self.rg(a) || self.rg(b);
        let out = self.push_output("concat", out_shape, data, rg)?;
        self.record(Op::Concat { a, b, out, axis });
        Ok(out)
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Weighted cross-entropy fused with log-softmax over `[B, C]` logits:
    /// `Σᵢ wᵢ·(lse(lᵢ) − lᵢ[yᵢ]) / Σᵢ wᵢ`.
    pub fn weighted_ce_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let (_batch, c) = self.check_ce_inputs("weighted_ce_logits", logits, targets, weights)?;
        let ld = self.data(logits);
        let wsum: f64 = weights.iter().sum();
        let mut total = 0.0f64;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
            let mut se = 0.0f64;
            for &v in row {
                se += (v.as_f64() - mx).exp();
            }
            let lse = mx + se.ln();
            total += w * (lse - row[y].as_f64());
        }
        let rg = self.rg(logits);
        let out = self.push_output(
            "weighted_ce_logits",
            vec![1],
            vec![S::from_f64(total / wsum)],
            rg,
        )?;
        self.record(Op::WeightedCeLogits {
            logits,
            out,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        });
        Ok(out)
    }

    /// Weighted cross-entropy on probability rows:
    /// `Σᵢ wᵢ·(−ln pᵢ[yᵢ]) / Σᵢ wᵢ`. Errors if a target probability is 0.
    pub fn weighted_ce_probs(
        &mut self,
        probs: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let (_b, c) = self.check_ce_inputs("weighted_ce_probs", probs, targets, weights)?;
        let pd = self.data(probs);
        let wsum: f64 = weights.iter().sum();
        let mut total = 0.0f64;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            total += w * -pd[i * c + y].as_f64().ln();
        }
        let rg = self.rg(probs);
        let out = self.push_output(
            "weighted_ce_probs",
            vec![1],
            vec![S::from_f64(total / wsum)],
            rg,
        )?;
        self.record(Op::WeightedCeProbs {
            probs,
            out,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        });
        Ok(out)
    }

    fn check_ce_inputs(
        &self,
        op: &'static str,
        rows: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<(usize, usize), TensorError> {
        let s = self.shape(rows);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected [batch, classes], got {s:?}"),
            });
        }
        let (b, c) = (s[0], s[1]);
        if targets.len() != b || weights.len() != b {
            return Err(TensorError::Invalid {
                op,
                msg: format!(
                    "batch {b} but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("target {bad} out of range for {c} classes"),
            });
        }
        Ok((b, c))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate additively into
    /// `requires_grad` leaves; intermediate adjoints are local to the call.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.recording {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "tape was created forward-only".into(),
            });
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![S::one()]);

        // Reverse execution order, each op exactly once.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op, &mut adj);
        }
        self.ops = ops;

        for (i, adj_i) in adj.into_iter().enumerate() {
            if let (true, true, Some(g)) = (self.is_leaf[i], self.nodes[i].requires_grad(), adj_i)
            {
                let slot = self.nodes[i].grad_mut();
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<S>>], v: Var, grad: Vec<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn backward_op(&self, op: &Op<S>, adj: &mut [Option<Vec<S>>]) {
        match op {
            Op::Binary { kind, a, b, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                let os = self.shape(*out).to_vec();
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                match kind {
                    BinKind::Add => {
                        self.accumulate(adj, *a, reduce_to_shape(&go, &os, &sa));
                        self.accumulate(adj, *b, reduce_to_shape(&go, &os, &sb));
                    }
                    BinKind::Sub => {
                        self.accumulate(adj, *a, reduce_to_shape(&go, &os, &sa));
                        let neg: Vec<S> = go.iter().map(|&g| -g).collect();
                        self.accumulate(adj, *b, reduce_to_shape(&neg, &os, &sb));
                    }
                    BinKind::Mul => {
                        if self.rg(*a) {
                            let grid =
                                broadcast_map(&go, &os, self.data(*b), &sb, &os, |g, y| g * y);
                            self.accumulate(adj, *a, reduce_to_shape(&grid, &os, &sa));
                        }
                        if self.rg(*b) {
                            let grid =
                                broadcast_map(&go, &os, self.data(*a), &sa, &os, |g, x| g * x);
                            self.accumulate(adj, *b, reduce_to_shape(&grid, &os, &sb));
                        }
                    }
                    BinKind::Div => {
                        if self.rg(*a) {
                            let grid =
                                broadcast_map(&go, &os, self.data(*b), &sb, &os, |g, y| g / y);
                            self.accumulate(adj, *a, reduce_to_shape(&grid, &os, &sa));
                        }
                        if self.rg(*b) {
                            // d/db (a/b) = -a/b²
                            let ga = broadcast_map(&go, &os, self.data(*a), &sa, &os, |g, x| g * x);
                            let grid = broadcast_map(&ga, &os, self.data(*b), &sb, &os, |g, y| {
                                -g / (y * y)
                            });
                            self.accumulate(adj, *b, reduce_to_shape(&grid, &os, &sb));
                        }
                    }
                }
            }
            Op::Unary { kind, x, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                let xd = self.data(*x);
                let od = self.data(*out);
                let grad: Vec<S> = match kind {
                    UnKind::Neg => go.iter().map(|&g| -g).collect(),
                    UnKind::Exp => go.iter().zip(od).map(|(&g, &y)| g * y).collect(),
                    UnKind::Log => go.iter().zip(xd).map(|(&g, &v)| g / v).collect(),
                    UnKind::Sigmoid => go
                        .iter()
                        .zip(od)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect(),
                    UnKind::Relu => go
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                        .collect(),
                    UnKind::Gelu => go.iter().zip(xd).map(|(&g, &v)| g * gelu_grad(v)).collect(),
                };
                self.accumulate(adj, *x, grad);
            }
            Op::Scale { x, c, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                self.accumulate(adj, *x, go.iter().map(|&g| g * *c).collect());
            }
            Op::AddScalar { x, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                self.accumulate(adj, *x, go);
            }
            Op::Matmul { a, b, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul_nt(&go, self.data(*b), &mut da, m, k, n);
                    self.accumulate(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul_tn(self.data(*a), &go, &mut db, m, k, n);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                out,
                meta,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                if self.rg(*x) {
                    let dx = kernels::conv1d_backward_input(&go, self.data(*w), meta);
                    self.accumulate(adj, *x, dx);
                }
                if self.rg(*w) {
                    let dw = kernels::conv1d_backward_weight(self.data(*x), &go, meta);
                    self.accumulate(adj, *w, dw);
                }
                if let Some(bv) = bias {
                    if self.rg(*bv) {
                        let db = kernels::conv1d_backward_bias(&go, meta);
                        self.accumulate(adj, *bv, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out,
                mean,
                istd,
                training,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                self.backward_batch_norm(adj, *x, *gamma, *beta, &go, mean, istd, *training);
            }
            Op::Dropout {
                x,
                out,
                seed,
                layer,
                step,
                p,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                let keep_scale = S::from_f64(1.0 / (1.0 - p));
                let grad: Vec<S> = go
                    .par_iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        if counter_uniform(*seed, *layer, *step, i as u64) < *p {
                            S::zero()
                        } else {
                            g * keep_scale
                        }
                    })
                    .collect();
                self.accumulate(adj, *x, grad);
            }
            Op::Softmax { x, out, axis } => {
                let Some(go) = adj[out.0].clone() else { return };
                let shape = self.shape(*out).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let y = self.data(*out);
                let mut grad = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let mut dot = 0.0f64;
                        for a in 0..extent {
                            let idx = base + a * inner;
                            dot += go[idx].as_f64() * y[idx].as_f64();
                        }
                        let dot = S::from_f64(dot);
                        for a in 0..extent {
                            let idx = base + a * inner;
                            grad[idx] = y[idx] * (go[idx] - dot);
                        }
                    }
                }
                self.accumulate(adj, *x, grad);
            }
            Op::SumAxis {
                x,
                out,
                axis,
                keepdim: _,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                let shape = self.shape(*x).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let mut grad = vec![S::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    for a in 0..extent {
                        let dst = &mut grad[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        dst.copy_from_slice(&go[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(adj, *x, grad);
            }
            Op::SumAll { x, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                self.accumulate(adj, *x, vec![go[0]; self.value(*x).numel()]);
            }
            Op::Reshape { x, out } => {
                let Some(go) = adj[out.0].clone() else { return };
                self.accumulate(adj, *x, go);
            }
            Op::Narrow {
                x,
                out,
                axis,
                start,
                len,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                let shape = self.shape(*x).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let mut grad = vec![S::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst =
                        &mut grad[(o * extent + start) * inner..(o * extent + start + len) * inner];
                    dst.copy_from_slice(&go[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(adj, *x, grad);
            }
            Op::Concat { a, b, out, axis } => {
                let Some(go) = adj[out.0].clone() else { return };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, ea, inner) = split_axis(&sa, *axis);
                let eb = sb[*axis];
                let mut ga = vec![S::zero(); self.value(*a).numel()];
                let mut gb = vec![S::zero(); self.value(*b).numel()];
                for o in 0..outer {
                    let src = &go[o * (ea + eb) * inner..(o + 1) * (ea + eb) * inner];
                    ga[o * ea * inner..(o + 1) * ea * inner].copy_from_slice(&src[..ea * inner]);
                    gb[o * eb * inner..(o + 1) * eb * inner].copy_from_slice(&src[ea * inner..]);
                }
                self.accumulate(adj, *a, ga);
                self.accumulate(adj, *b, gb);
            }
            Op::WeightedCeLogits {
                logits,
                out,
                targets,
                weights,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                let c = self.shape(*logits)[1];
                let ld = self.data(*logits);
                let wsum: f64 = weights.iter().sum();
                let coeff = go[0].as_f64() / wsum;
                let mut grad = vec![S::zero(); ld.len()];
                for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &ld[i * c..(i + 1) * c];
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
                    let mut se = 0.0f64;
                    for &v in row {
                        se += (v.as_f64() - mx).exp();
                    }
                    for j in 0..c {
                        let p = (row[j].as_f64() - mx).exp() / se;
                        let delta = if j == y { 1.0 } else { 0.0 };
                        grad[i * c + j] = S::from_f64(coeff * w * (p - delta));
                    }
                }
                self.accumulate(adj, *logits, grad);
            }
            Op::WeightedCeProbs {
                probs,
                out,
                targets,
                weights,
            } => {
                let Some(go) = adj[out.0].clone() else { return };
                let c = self.shape(*probs)[1];
                let pd = self.data(*probs);
                let wsum: f64 = weights.iter().sum();
                let coeff = go[0].as_f64() / wsum;
                let mut grad = vec![S::zero(); pd.len()];
                for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    grad[i * c + y] = S::from_f64(-coeff * w / pd[i * c + y].as_f64());
                }
                self.accumulate(adj, *probs, grad);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &self,
        adj: &mut [Option<Vec<S>>],
        x: Var,
        gamma: Var,
        beta: Var,
        go: &[S],
        mean: &[f64],
        istd: &[f64],
        training: bool,
    ) {
        let shape = self.shape(x);
        let (batch, c, t) = (shape[0], shape[1], shape[2]);
        let n = (batch * t) as f64;
        let xd = self.data(x);
        let gd = self.data(gamma);

        // per-channel Σgo and Σgo·x̂ (x̂ recomputed from saved mean/istd)
        let mut sum_go = vec![0.0f64; c];
        let mut sum_go_xhat = vec![0.0f64; c];
        for row in 0..batch * c {
            let ch = row % c;
            let (m, is) = (mean[ch], istd[ch]);
            let gr = &go[row * t..(row + 1) * t];
            let xr = &xd[row * t..(row + 1) * t];
            let mut s0 = 0.0f64;
            let mut s1 = 0.0f64;
            for (&g, &v) in gr.iter().zip(xr) {
                let gf = g.as_f64();
                s0 += gf;
                s1 += gf * (v.as_f64() - m) * is;
            }
            sum_go[ch] += s0;
            sum_go_xhat[ch] += s1;
        }

        if self.rg(gamma) {
            self.accumulate(
                adj,
                gamma,
                sum_go_xhat.iter().map(|&v| S::from_f64(v)).collect(),
            );
        }
        if self.rg(beta) {
            self.accumulate(adj, beta, sum_go.iter().map(|&v| S::from_f64(v)).collect());
        }
        if self.rg(x) {
            let mut grad = vec![S::zero(); xd.len()];
            grad.par_chunks_mut(t).enumerate().for_each(|(row, gr_out)| {
                let ch = row % c;
                let (m, is) = (mean[ch], istd[ch]);
                let g = gd[ch].as_f64();
                let gr = &go[row * t..(row + 1) * t];
                let xr = &xd[row * t..(row + 1) * t];
                if training {
                    let c0 = sum_go[ch] / n;
                    let c1 = sum_go_xhat[ch] / n;
                    for ((o, &gv), &xv) in gr_out.iter_mut().zip(gr).zip(xr) {
                        let xhat = (xv.as_f64() - m) * is;
                        *o = S::from_f64(g * is * (gv.as_f64() - c0 - xhat * c1));
                    }
                } else {
                    let scale = S::from_f64(g * is);
                    for (o, &gv) in gr_out.iter_mut().zip(gr) {
                        *o = gv * scale;
                    }
                }
            });
            self.accumulate(adj, x, grad);
        }
    }
}

/// Split `shape` at `axis` into (outer, extent, inner) products.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

// tanh written through exp: saturates cleanly at ±1 and exp is markedly
// cheaper than libm tanh
#[inline]
fn tanh_via_exp<S: Scalar>(v: S) -> S {
    let two = S::from_f64(2.0);
    let e = (v + v).exp();
    S::one() - two / (e + S::one())
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + tanh_via_exp(u))
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = tanh_via_exp(u);
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn add_forced_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t64(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_and_its_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, -2.0, 5.0]).with_grad());
        let z = tape.leaf(t64(&[1], &[0.0]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn exp_log_inverse_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[0.5, 2.0]));
        let l = tape.log(x).unwrap();
        let y = tape.exp(l).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_nonpositive_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, -1.0]));
        assert!(matches!(
            tape.log(x),
            Err(TensorError::NonFinite { op: "log" })
        ));
        let z = tape.leaf(t64(&[1], &[0.0]));
        assert!(tape.log(z).is_err());
    }

    #[test]
    fn div_by_zero_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let z = tape.leaf(t64(&[2], &[1.0, 0.0]));
        assert!(matches!(
            tape.div(a, z),
            Err(TensorError::NonFinite { op: "div" })
        ));
    }

    #[test]
    fn matmul_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t64(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_hand_product_and_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t64(&[2, 1], &[1.0, 1.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 7.0]);
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        // dA = dC·Bᵀ = ones·[1,1]ᵀ; dB = Aᵀ·dC = [[4],[6]]
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 5], &[2.5; 5]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.2).abs() < 1e-12);
        }
        let l = tape.leaf(t64(&[1, 2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(l, 1).unwrap();
        let d = tape.data(s);
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_sums() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.3, -1.2, 4.0, 0.0, 2.2, -0.7];
        let x = tape.leaf(t64(&[2, 3], &vals));
        let shifted: Vec<f64> = vals.iter().map(|v| v + 13.5).collect();
        let xs = tape.leaf(t64(&[2, 3], &shifted));
        let y = tape.softmax(x, 1).unwrap();
        let ys = tape.softmax(xs, 1).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in tape.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn reductions_and_their_gradients() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(t64(&[1, 7], &[1.0; 7]).with_grad());
        let s = tape.sum_axis(ones, 1, false).unwrap();
        assert_eq!(tape.data(s), &[7.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(ones).unwrap(), &[1.0; 7]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[2.0, 4.0]));
        let m = tape.mean_axis(x, 0, false).unwrap();
        assert_eq!(tape.data(m), &[3.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[5.0, -1.0, 2.0]).with_grad());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 1.0]).with_grad());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.clear_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn dropout_contracts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        // p = 0: exact identity (same var)
        let y = tape.dropout(x, 0.0, 1, 2, 3, Mode::Train).unwrap();
        assert_eq!(y, x);
        // eval mode: identity regardless of p
        let z = tape.dropout(x, 0.9, 1, 2, 3, Mode::Eval).unwrap();
        assert_eq!(z, x);
        // p >= 1 rejected
        assert!(tape.dropout(x, 1.0, 1, 2, 3, Mode::Train).is_err());
        // train mode: zeros or rescales, mask reproducible
        let a = tape.dropout(x, 0.5, 7, 1, 1, Mode::Train).unwrap();
        let b = tape.dropout(x, 0.5, 7, 1, 1, Mode::Train).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
        for (&v, &orig) in tape.data(a).iter().zip(tape.data(x)) {
            assert!(v == 0.0 || (v - orig * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let mut rng = crate::rng::RngStream::new(3, "bn-test");
        let x = Tensor::<f64>::rand_uniform(&[4, 3, 10], -2.0, 5.0, &mut rng);
        let xv = tape.leaf(x);
        let gamma = tape.leaf(t64(&[3], &[1.0; 3]));
        let beta = tape.leaf(t64(&[3], &[0.0; 3]));
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = tape
            .batch_norm(xv, gamma, beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)
            .unwrap();
        // per-channel mean ~0, var ~1 over (batch, time)
        let yd = tape.data(y);
        for ch in 0..3 {
            let mut vals = Vec::new();
            for b in 0..4 {
                vals.extend_from_slice(&yd[(b * 3 + ch) * 10..(b * 3 + ch + 1) * 10]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
            // running stats moved toward batch stats
            assert!(rm[ch] != 0.0);
        }
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).with_grad());
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
        let loss = tape.sum_all(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = crate::rng::RngStream::new(9, "det");
        let x = Tensor::<f64>::rand_uniform(&[3, 4, 8], -1.0, 1.0, &mut rng).with_grad();
        let w = Tensor::<f64>::rand_uniform(&[4, 4, 3], -0.5, 0.5, &mut rng).with_grad();
        let run = |x: &Tensor<f64>, w: &Tensor<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let c = tape.conv1d(xv, wv, None, 2, 1).unwrap();
            let g = tape.gelu(c).unwrap();
            let loss = tape.sum_all(g).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(xv).unwrap().to_vec(),
                tape.grad(wv).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run(&x, &w);
        let (gx2, gw2) = run(&x, &w);
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 8]));
        let w_even = tape.leaf(Tensor::zeros(&[4, 4, 4]));
        assert!(tape.conv1d(x, w_even, None, 1, 1).is_err());
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3]));
        assert!(tape.conv1d(x, w, None, 1, 3).is_err()); // 4 % 3 != 0
    }

    #[test]
    fn weighted_ce_examples() {
        // perfect one-hot prediction → loss ≈ 0
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t64(&[1, 3], &[1.0, 0.0, 0.0]));
        // exact one-hot has ln(1)=0 at the target
        let loss = tape.weighted_ce_probs(p, &[0], &[1.0]).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-6);

        // uniform prediction, single target with weight 10 → ln C
        let c = 39;
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t64(&[1, c], &vec![1.0 / c as f64; c]));
        let loss = tape.weighted_ce_probs(p, &[2], &[10.0]).unwrap();
        assert!((tape.data(loss)[0] - (c as f64).ln()).abs() < 1e-12);

        // target out of range
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t64(&[1, 3], &[0.2, 0.3, 0.5]));
        assert!(tape.weighted_ce_probs(p, &[3], &[1.0]).is_err());
    }

    #[test]
    fn weighted_ce_logits_weight_scales_gradient() {
        // two uniform rows, weights 10 and 1 → loss = ln C and the weighted
        // row's logit gradient is 10× the other's
        let c = 39usize;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t64(&[2, c], &vec![0.0; 2 * c]).with_grad());
        let loss = tape
            .weighted_ce_logits(logits, &[2, 5], &[10.0, 1.0])
            .unwrap();
        assert!((tape.data(loss)[0] - (c as f64).ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        let ratio = g[2].abs() / g[c + 5].abs();
        assert!((ratio - 10.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn forward_only_tape_has_no_backward() {
        let mut tape = Tape::<f64>::forward_only();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.sum_all(x).unwrap();
        assert_eq!(tape.num_ops(), 0);
        assert!(tape.backward(y).is_err());
    }
}
