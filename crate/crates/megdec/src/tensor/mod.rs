//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a contiguous row-major array with an optional gradient;
//! [`Tape`] records differentiable operations during the forward pass and
//! replays them in reverse to accumulate gradients into `requires_grad`
//! leaves. Forward outputs are checked for non-finite values so NaN/Inf
//! surface as errors at the op that produced them instead of propagating.

mod gradcheck;
mod kernels;
mod tape;


pub use gradcheck::{
    finite_diff_check, finite_diff_check_perturbed, GradCheckReport, GradCheckSuite, OpCheck,
    DEFAULT_EPS, OP_TOLERANCE,
};
pub use tape::{Mode, Op, Tape, Var};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} has {expected} elements but data has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("conv1d: {0}")]
    Conv(String),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout probability {0} must lie in [0, 1)")]
    BadDropout(f64),
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(
            shape.to_vec(),
            values.iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    /// Uniform values in `[lo, hi)` drawn from `rng`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.uniform_in(lo, hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<S> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// Vectorizable finiteness scan.
pub(crate) fn all_finite<S: Scalar>(data: &[S]) -> bool {
    let mut ok = true;
    for chunk in data.chunks(64) {
        let mut bad = false;
        for &v in chunk {
            bad |= !v.is_finite();
        }
        ok &= !bad;
        if !ok {
            return false;
        }
    }
    ok
}

pub(crate) fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<(), TensorError> {
    if all_finite(data) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Shape of `a op b` under trailing-aligned broadcasting (extent 1 stretches),
/// or an error if the shapes are incompatible.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides for `shape` padded to `rank`, with stride 0 on broadcast
/// (extent-1) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over the broadcast grid of `a` and `b`.
pub(crate) fn broadcast_map<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S + Sync,
) -> Vec<S> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![S::zero(); numel];
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let last = *out_shape.last().unwrap_or(&1);
    let rows = numel / last;
    let la = *sa.last().unwrap_or(&0);
    let lb = *sb.last().unwrap_or(&0);

    for (row, out_row) in out.chunks_mut(last).enumerate() {
        let (mut off_a, mut off_b) = (0usize, 0usize);
        let mut rem = row;
        for d in (0..out_shape.len().saturating_sub(1)).rev() {
            let idx = rem % out_shape[d].max(1);
            rem /= out_shape[d].max(1);
            off_a += idx * sa[d];
            off_b += idx * sb[d];
        }
        debug_assert!(rem == 0 || rows == 1);
        match (la, lb) {
            (1, 1) => {
                for (o, (x, y)) in out_row
                    .iter_mut()
                    .zip(a[off_a..off_a + last].iter().zip(&b[off_b..off_b + last]))
                {
                    *o = f(*x, *y);
                }
            }
            (1, 0) => {
                let y = b[off_b];
                for (o, x) in out_row.iter_mut().zip(&a[off_a..off_a + last]) {
                    *o = f(*x, y);
                }
            }
            (0, 1) => {
                let x = a[off_a];
                for (o, y) in out_row.iter_mut().zip(&b[off_b..off_b + last]) {
                    *o = f(x, *y);
                }
            }
            _ => {
                let v = f(a[off_a], b[off_b]);
                for o in out_row.iter_mut() {
                    *o = v;
                }
            }
        }
    }
    out
}

/// Reduce a gradient on the broadcast `out_shape` back to `in_shape` by
/// summing over stretched axes. Accumulates in f64.
pub(crate) fn reduce_to_shape<S: Scalar>(
    grad: &[S],
    out_shape: &[usize],
    in_shape: &[usize],
) -> Vec<S> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let n_in: usize = in_shape.iter().product();
    let mut acc = vec![0.0f64; n_in];
    let strides = broadcast_strides(in_shape, out_shape);
    let last = *out_shape.last().unwrap_or(&1);
    let ls = *strides.last().unwrap_or(&0);

    for (row, grad_row) in grad.chunks(last).enumerate() {
        let mut off = 0usize;
        let mut rem = row;
        for d in (0..out_shape.len().saturating_sub(1)).rev() {
            let idx = rem % out_shape[d].max(1);
            rem /= out_shape[d].max(1);
            off += idx * strides[d];
        }
        if ls == 1 {
            for (a, &g) in acc[off..off + last].iter_mut().zip(grad_row) {
                *a += g.as_f64();
            }
        } else {
            let mut s = 0.0f64;
            for &g in grad_row {
                s += g.as_f64();
            }
            acc[off] += s;
        }
    }
    acc.into_iter().map(S::from_f64).collect()
}
