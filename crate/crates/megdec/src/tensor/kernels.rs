//! Hot numeric loops: matmul and 1D convolution, plus small helpers.
//!
//! Everything here is written as contiguous axpy/dot passes so LLVM can
//! vectorize, with fixed iteration order inside each output region. Rayon
//! parallelism only ever splits *disjoint* output regions, so results are
//! bitwise identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed 8-lane accumulation scheme (deterministic and
/// vectorizable).
#[inline]
pub fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    debug_assert_eq!(x.len(), y.len());
    const L: usize = 8;
    let mut lanes = [S::zero(); L];
    let mut cx = x.chunks_exact(L);
    let mut cy = y.chunks_exact(L);
    for (xb, yb) in (&mut cx).zip(&mut cy) {
        for j in 0..L {
            lanes[j] += xb[j] * yb[j];
        }
    }
    let mut s = S::zero();
    for lane in lanes {
        s += lane;
    }
    for (&xi, &yi) in cx.remainder().iter().zip(cy.remainder()) {
        s += xi * yi;
    }
    s
}

/// Sum in f64 with fixed 8-lane accumulation.
#[inline]
pub fn sum_f64<S: Scalar>(x: &[S]) -> f64 {
    const L: usize = 8;
    let mut lanes = [0.0f64; L];
    let mut cx = x.chunks_exact(L);
    for xb in &mut cx {
        for j in 0..L {
            lanes[j] += xb[j].as_f64();
        }
    }
    let mut s = 0.0;
    for lane in lanes {
        s += lane;
    }
    for &xi in cx.remainder() {
        s += xi.as_f64();
    }
    s
}

// ── Matmul ───────────────────────────────────────────────────────────

/// C = A·B with A: \[m×k\], B: \[k×n\]. C must be zeroed.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            axpy(c_row, av, &b[p * n..(p + 1) * n]);
        }
    });
}

/// dA = dC·Bᵀ with dC: \[m×n\], B: \[k×n\] → dA: \[m×k\].
pub fn matmul_nt<S: Scalar>(dc: &[S], b: &[S], da: &mut [S], _m: usize, k: usize, n: usize) {
    da.par_chunks_mut(k).enumerate().for_each(|(i, da_row)| {
        let dc_row = &dc[i * n..(i + 1) * n];
        for (p, d) in da_row.iter_mut().enumerate() {
            *d = dot(dc_row, &b[p * n..(p + 1) * n]);
        }
    });
}

/// dB = Aᵀ·dC with A: \[m×k\], dC: \[m×n\] → dB: \[k×n\].
pub fn matmul_tn<S: Scalar>(a: &[S], dc: &[S], db: &mut [S], m: usize, k: usize, n: usize) {
    db.par_chunks_mut(n).enumerate().for_each(|(p, db_row)| {
        for i in 0..m {
            axpy(db_row, a[i * k + p], &dc[i * n..(i + 1) * n]);
        }
    });
}

// ── Conv1d (same padding, stride 1, odd K) ───────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMeta {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t: usize,
    pub k: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvMeta {
    #[inline]
    fn cig(&self) -> usize {
        self.c_in / self.groups
    }
    #[inline]
    fn cog(&self) -> usize {
        self.c_out / self.groups
    }
    /// Signed time offset of tap `kk`.
    #[inline]
    fn tap_offset(&self, kk: usize) -> isize {
        (kk as isize - (self.k as isize - 1) / 2) * self.dilation as isize
    }
}

/// Zero-padded copy of every row: `padded[row][lo .. lo+t] = src[row]` with
/// `lo` zeros on each side, so the convolution loops never branch on bounds.
fn pad_rows<S: Scalar>(src: &[S], rows: usize, t: usize, lo: usize) -> Vec<S> {
    let pt = t + 2 * lo;
    let mut padded = vec![S::zero(); rows * pt];
    padded
        .par_chunks_mut(pt)
        .enumerate()
        .for_each(|(r, dst)| dst[lo..lo + t].copy_from_slice(&src[r * t..(r + 1) * t]));
    padded
}

/// `out[i] += Σ_k w[k]·xpad[i + k·dilation]` over the full row; `xpad` is the
/// padded input row, `out` has length t. One fused pass over K unit-stride
/// streams.
#[inline(always)]
fn conv_row_acc<const K: usize, S: Scalar>(out: &mut [S], xpad: &[S], w: &[S], dilation: usize) {
    let t = out.len();
    let mut wk = [S::zero(); K];
    wk.copy_from_slice(&w[..K]);
    let xs: [&[S]; K] = core::array::from_fn(|k| &xpad[k * dilation..k * dilation + t]);
    for i in 0..t {
        let mut a = out[i];
        for k in 0..K {
            a += wk[k] * xs[k][i];
        }
        out[i] = a;
    }
}

/// `acc[k] += Σ_{rows, t} dout[row][t]·xpad[row][t + k·dilation]` over a block
/// of rows; 8-wide lanes per tap persist across the rows.
#[inline(always)]
fn conv_rows_wgrad<const K: usize, S: Scalar>(
    acc: &mut [S],
    dout: &[S],
    dout_stride: usize,
    xpad: &[S],
    xpad_stride: usize,
    n_rows: usize,
    t: usize,
    dilation: usize,
) {
    const W: usize = 8;
    let mut lanes = [[S::zero(); W]; K];
    let mut tails = [S::zero(); K];
    for r in 0..n_rows {
        let d = &dout[r * dout_stride..r * dout_stride + t];
        let xrow = &xpad[r * xpad_stride..];
        let xs: [&[S]; K] = core::array::from_fn(|k| &xrow[k * dilation..k * dilation + t]);
        let mut i = 0usize;
        while i + W <= t {
            let mut db = [S::zero(); W];
            db.copy_from_slice(&d[i..i + W]);
            for k in 0..K {
                let xk = &xs[k][i..i + W];
                for j in 0..W {
                    lanes[k][j] += db[j] * xk[j];
                }
            }
            i += W;
        }
        for k in 0..K {
            for ii in i..t {
                tails[k] += d[ii] * xs[k][ii];
            }
        }
    }
    for k in 0..K {
        let mut s = tails[k];
        for j in 0..W {
            s += lanes[k][j];
        }
        acc[k] += s;
    }
}

// Constant-dilation instantiations: the common dilations are baked in as
// const parameters so the hot loops compile with fixed strides.
fn conv_row_acc_c<const K: usize, const DIL: usize, S: Scalar>(out: &mut [S], xpad: &[S], w: &[S]) {
    conv_row_acc::<K, S>(out, xpad, w, DIL)
}

#[allow(clippy::too_many_arguments)]
fn conv_rows_wgrad_c<const K: usize, const DIL: usize, S: Scalar>(
    acc: &mut [S],
    dout: &[S],
    dout_stride: usize,
    xpad: &[S],
    xpad_stride: usize,
    n_rows: usize,
    t: usize,
) {
    conv_rows_wgrad::<K, S>(acc, dout, dout_stride, xpad, xpad_stride, n_rows, t, DIL)
}

macro_rules! dilation_arms {
    ($f_const:ident, $f_dyn:ident, $k:literal, $dil:expr, ($($args:expr),*)) => {
        match $dil {
            1 => $f_const::<$k, 1, S>($($args),*),
            2 => $f_const::<$k, 2, S>($($args),*),
            4 => $f_const::<$k, 4, S>($($args),*),
            8 => $f_const::<$k, 8, S>($($args),*),
            16 => $f_const::<$k, 16, S>($($args),*),
            32 => $f_const::<$k, 32, S>($($args),*),
            d => $f_dyn::<$k, S>($($args),*, d),
        }
    };
}

#[inline(always)]
fn conv_row_dispatch<S: Scalar>(out: &mut [S], xpad: &[S], w: &[S], k: usize, dilation: usize) {
    match k {
        1 => conv_row_acc_c::<1, 1, S>(out, xpad, w), // single tap: dilation is irrelevant
        3 => dilation_arms!(conv_row_acc_c, conv_row_acc, 3, dilation, (out, xpad, w)),
        5 => dilation_arms!(conv_row_acc_c, conv_row_acc, 5, dilation, (out, xpad, w)),
        7 => dilation_arms!(conv_row_acc_c, conv_row_acc, 7, dilation, (out, xpad, w)),
        9 => dilation_arms!(conv_row_acc_c, conv_row_acc, 9, dilation, (out, xpad, w)),
        _ => conv_row_acc_dyn(out, xpad, w, k, dilation),
    }
}

/// Arbitrary odd K: per-tap axpy against the padded row.
fn conv_row_acc_dyn<S: Scalar>(out: &mut [S], xpad: &[S], w: &[S], k: usize, dilation: usize) {
    let t = out.len();
    for (kk, &wv) in w[..k].iter().enumerate() {
        axpy(out, wv, &xpad[kk * dilation..kk * dilation + t]);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv_rows_wgrad_dispatch<S: Scalar>(
    acc: &mut [S],
    dout: &[S],
    dout_stride: usize,
    xpad: &[S],
    xpad_stride: usize,
    n_rows: usize,
    t: usize,
    k: usize,
    dilation: usize,
) {
    match k {
        1 => conv_rows_wgrad_c::<1, 1, S>(acc, dout, dout_stride, xpad, xpad_stride, n_rows, t),
        3 => dilation_arms!(
            conv_rows_wgrad_c,
            conv_rows_wgrad,
            3,
            dilation,
            (acc, dout, dout_stride, xpad, xpad_stride, n_rows, t)
        ),
        5 => dilation_arms!(
            conv_rows_wgrad_c,
            conv_rows_wgrad,
            5,
            dilation,
            (acc, dout, dout_stride, xpad, xpad_stride, n_rows, t)
        ),
        7 => dilation_arms!(
            conv_rows_wgrad_c,
            conv_rows_wgrad,
            7,
            dilation,
            (acc, dout, dout_stride, xpad, xpad_stride, n_rows, t)
        ),
        _ => {
            for r in 0..n_rows {
                let d = &dout[r * dout_stride..r * dout_stride + t];
                let xrow = &xpad[r * xpad_stride..];
                for (kk, a) in acc.iter_mut().enumerate() {
                    *a += dot(d, &xrow[kk * dilation..kk * dilation + t]);
                }
            }
        }
    }
}

/// out\[b, co, t\] = bias\[co\] + Σ_{ci∈group, kk} w\[co, ci, kk\]·x\[b, ci, t+o_kk\]
/// with zero padding outside \[0, T).
pub fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, m: &ConvMeta) -> Vec<S> {
    let (t, k, cig, cog) = (m.t, m.k, m.cig(), m.cog());
    let lo = (k - 1) / 2 * m.dilation;
    let pt = t + 2 * lo;
    let xpad = pad_rows(x, m.batch * m.c_in, t, lo);
    let mut out = vec![S::zero(); m.batch * m.c_out * t];
    out.par_chunks_mut(m.c_out * t).enumerate().for_each(|(b, ob)| {
        let xb = &xpad[b * m.c_in * pt..(b + 1) * m.c_in * pt];
        for co in 0..m.c_out {
            let orow = &mut ob[co * t..(co + 1) * t];
            if let Some(bias) = bias {
                orow.fill(bias[co]);
            }
            let gi = co / cog;
            for ci_local in 0..cig {
                let ci = gi * cig + ci_local;
                let xrow = &xb[ci * pt..(ci + 1) * pt];
                let wrow = &w[(co * cig + ci_local) * k..(co * cig + ci_local + 1) * k];
                conv_row_dispatch(orow, xrow, wrow, k, m.dilation);
            }
        }
    });
    out
}

/// dx\[b, ci, s\] = Σ_{co∈group, kk} w\[co, ci, kk\]·dout\[b, co, s−o_kk\]
/// (a correlation with the tap-reversed kernel against the padded upstream
/// gradient).
pub fn conv1d_backward_input<S: Scalar>(dout: &[S], w: &[S], m: &ConvMeta) -> Vec<S> {
    let (t, k, cig, cog) = (m.t, m.k, m.cig(), m.cog());
    let lo = (k - 1) / 2 * m.dilation;
    let pt = t + 2 * lo;
    let dpad = pad_rows(dout, m.batch * m.c_out, t, lo);
    let mut wrev = vec![S::zero(); w.len()];
    for row in 0..m.c_out * cig {
        for kk in 0..k {
            wrev[row * k + kk] = w[row * k + (k - 1 - kk)];
        }
    }
    let mut dx = vec![S::zero(); m.batch * m.c_in * t];
    dx.par_chunks_mut(m.c_in * t).enumerate().for_each(|(b, dxb)| {
        let db = &dpad[b * m.c_out * pt..(b + 1) * m.c_out * pt];
        for gi in 0..m.groups {
            for ci_local in 0..cig {
                let ci = gi * cig + ci_local;
                let dxrow = &mut dxb[ci * t..(ci + 1) * t];
                for co in gi * cog..(gi + 1) * cog {
                    let drow = &db[co * pt..(co + 1) * pt];
                    let wrow = &wrev[(co * cig + ci_local) * k..(co * cig + ci_local + 1) * k];
                    conv_row_dispatch(dxrow, drow, wrow, k, m.dilation);
                }
            }
        }
    });
    dx
}

/// dw\[co, ci, kk\] = Σ_{b, t} dout\[b, co, t\]·x\[b, ci, t+o_kk\]
///
/// Batch items are processed in fixed 16-sample chunks whose partial sums
/// combine in chunk order, so results do not depend on the thread count.
pub fn conv1d_backward_weight<S: Scalar>(x: &[S], dout: &[S], m: &ConvMeta) -> Vec<S> {
    let (t, k, cig, cog) = (m.t, m.k, m.cig(), m.cog());
    let lo = (k - 1) / 2 * m.dilation;
    let pt = t + 2 * lo;
    let xpad = pad_rows(x, m.batch * m.c_in, t, lo);
    let dw_len = m.c_out * cig * k;
    const CHUNK: usize = 16;
    let n_chunks = m.batch.div_ceil(CHUNK);
    let run_chunk = |c: usize| {
        let b0 = c * CHUNK;
        let rows = CHUNK.min(m.batch - b0);
        let mut local = vec![S::zero(); dw_len];
        for co in 0..m.c_out {
            let gi = co / cog;
            let dout_base = &dout[(b0 * m.c_out + co) * t..];
            for ci_local in 0..cig {
                let ci = gi * cig + ci_local;
                let xpad_base = &xpad[(b0 * m.c_in + ci) * pt..];
                let accrow = &mut local[(co * cig + ci_local) * k..(co * cig + ci_local + 1) * k];
                conv_rows_wgrad_dispatch(
                    accrow,
                    dout_base,
                    m.c_out * t,
                    xpad_base,
                    m.c_in * pt,
                    rows,
                    t,
                    k,
                    m.dilation,
                );
            }
        }
        local
    };
    let partials: Vec<Vec<S>> = if n_chunks > 1 {
        (0..n_chunks).into_par_iter().map(run_chunk).collect()
    } else {
        (0..n_chunks).map(run_chunk).collect()
    };
    let mut dw = vec![S::zero(); dw_len];
    for local in partials {
        for (d, l) in dw.iter_mut().zip(local) {
            *d += l;
        }
    }
    dw
}

/// dbias\[co\] = Σ_{b, t} dout\[b, co, t\], accumulated in f64.
pub fn conv1d_backward_bias<S: Scalar>(dout: &[S], m: &ConvMeta) -> Vec<S> {
    let t = m.t;
    (0..m.c_out)
        .into_par_iter()
        .map(|co| {
            let mut acc = 0.0f64;
            for b in 0..m.batch {
                acc += sum_f64(&dout[(b * m.c_out + co) * t..(b * m.c_out + co + 1) * t]);
            }
            S::from_f64(acc)
        })
        .collect()
}

/// Per-channel mean and population variance over (batch, time), two-pass f64.
pub fn channel_mean_var<S: Scalar>(
    x: &[S],
    batch: usize,
    channels: usize,
    t: usize,
    ch: usize,
) -> (f64, f64) {
    let n = (batch * t) as f64;
    let mut sum = 0.0f64;
    for b in 0..batch {
        sum += sum_f64(&x[(b * channels + ch) * t..(b * channels + ch + 1) * t]);
    }
    let mean = sum / n;
    let mut ss = 0.0f64;
    for b in 0..batch {
        let row = &x[(b * channels + ch) * t..(b * channels + ch + 1) * t];
        const L: usize = 8;
        let mut lanes = [0.0f64; L];
        let mut cr = row.chunks_exact(L);
        for rb in &mut cr {
            for j in 0..L {
                let d = rb[j].as_f64() - mean;
                lanes[j] += d * d;
            }
        }
        for lane in lanes {
            ss += lane;
        }
        for &v in cr.remainder() {
            let d = v.as_f64() - mean;
            ss += d * d;
        }
    }
    (mean, ss / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: &ConvMeta) -> Vec<f64> {
        let (t, k) = (m.t, m.k);
        let (cig, cog) = (m.c_in / m.groups, m.c_out / m.groups);
        let half = (k as isize - 1) / 2;
        let mut out = vec![0.0; m.batch * m.c_out * t];
        for b in 0..m.batch {
            for co in 0..m.c_out {
                let gi = co / cog;
                for tt in 0..t as isize {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci_local in 0..cig {
                        let ci = gi * cig + ci_local;
                        for kk in 0..k as isize {
                            let src = tt + (kk - half) * m.dilation as isize;
                            if src >= 0 && src < t as isize {
                                acc += w[(co * cig + ci_local) * k + kk as usize]
                                    * x[(b * m.c_in + ci) * t + src as usize];
                            }
                        }
                    }
                    out[(b * m.c_out + co) * t + tt as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]]·[[1],[1]] = [[3],[7]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = vec![0.0; 2];
        matmul(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let m = [5.0, -1.0, 2.0, 7.0];
        let mut c = vec![0.0; 4];
        matmul(&eye, &m, &mut c, 2, 2, 2);
        assert_eq!(c.as_slice(), m.as_slice());
    }

    #[test]
    fn conv_same_padding_hand_case() {
        // x=[1,2,3], w=[1,1,1] → [3,6,5]
        let m = ConvMeta {
            batch: 1,
            c_in: 1,
            c_out: 1,
            t: 3,
            k: 3,
            dilation: 1,
            groups: 1,
        };
        let out = conv1d_forward(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], None, &m);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let m = ConvMeta {
            batch: 1,
            c_in: 1,
            c_out: 1,
            t: 5,
            k: 3,
            dilation: 1,
            groups: 1,
        };
        let x = [0.5, -1.0, 2.0, 0.0, 3.0];
        let out = conv1d_forward(&x, &[0.0, 1.0, 0.0], None, &m);
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn conv_dilation_spreads_taps() {
        // delta input at t=3, K=3 dilation=2: taps land at spacing 2
        let m = ConvMeta {
            batch: 1,
            c_in: 1,
            c_out: 1,
            t: 7,
            k: 3,
            dilation: 2,
            groups: 1,
        };
        let mut x = [0.0; 7];
        x[3] = 1.0;
        let out = conv1d_forward(&x, &[10.0, 20.0, 30.0], None, &m);
        assert_eq!(out, vec![0.0, 30.0, 0.0, 20.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn conv_matches_naive_on_random_shapes() {
        let mut rng = crate::rng::RngStream::new(42, "conv-oracle");
        for &(b, cin, cout, t, k, dil, groups) in &[
            (2usize, 4usize, 6usize, 11usize, 3usize, 1usize, 1usize),
            (1, 6, 6, 9, 5, 2, 2),
            (3, 4, 4, 8, 3, 2, 4), // depthwise
            (2, 8, 2, 13, 7, 1, 2),
            (1, 3, 9, 6, 3, 4, 3),
        ] {
            let m = ConvMeta {
                batch: b,
                c_in: cin,
                c_out: cout,
                t,
                k,
                dilation: dil,
                groups,
            };
            let x: Vec<f64> = (0..b * cin * t).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let w: Vec<f64> = (0..cout * (cin / groups) * k)
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let fast = conv1d_forward(&x, &w, Some(&bias), &m);
            let slow = naive_conv(&x, &w, Some(&bias), &m);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-12, "{f} vs {s}");
            }
        }
    }

    #[test]
    fn depthwise_equals_per_channel_loop() {
        // groups == c_in == c_out: every channel convolves independently
        let m = ConvMeta {
            batch: 2,
            c_in: 5,
            c_out: 5,
            t: 10,
            k: 3,
            dilation: 2,
            groups: 5,
        };
        let mut rng = crate::rng::RngStream::new(7, "depthwise");
        let x: Vec<f64> = (0..2 * 5 * 10).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..5 * 3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let fast = conv1d_forward(&x, &w, None, &m);
        // oracle: run each channel as its own 1-channel convolution
        for b in 0..2 {
            for c in 0..5 {
                let m1 = ConvMeta {
                    batch: 1,
                    c_in: 1,
                    c_out: 1,
                    t: 10,
                    k: 3,
                    dilation: 2,
                    groups: 1,
                };
                let xrow = &x[(b * 5 + c) * 10..(b * 5 + c + 1) * 10];
                let wrow = &w[c * 3..(c + 1) * 3];
                let or = conv1d_forward(xrow, wrow, None, &m1);
                let frow = &fast[(b * 5 + c) * 10..(b * 5 + c + 1) * 10];
                for (a, o) in frow.iter().zip(&or) {
                    assert!((a - o).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dot_and_sum_match_reference() {
        let x: Vec<f64> = (0..37).map(|i| i as f64 * 0.25 - 3.0).collect();
        let y: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-9);
        let naive_sum: f64 = x.iter().sum();
        assert!((sum_f64(&x) - naive_sum).abs() < 1e-9);
    }
}
