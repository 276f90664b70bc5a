//! Central finite-difference verification of the reverse pass.
//!
//! [`finite_diff_check`] compares the tape gradient of a scalar-valued tensor
//! function against `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` and reports the worst
//! relative error `|a−n| / max(1e-8, |a|+|n|)`. [`GradCheckSuite`] runs
//! randomized trials of every differentiable op at f64; the suite can
//! deliberately corrupt one op's analytic gradient to prove the comparison
//! actually detects broken backward implementations.

use super::{Mode, Tape, Tensor, TensorError, Var};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;

/// Worst-coordinate relative error between the tape gradient of `f` at `x`
/// and central finite differences with step `eps`.
pub fn finite_diff_check<S: Scalar, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<S>, Var) -> Result<Var, TensorError>,
{
    finite_diff_check_perturbed(&f, x, eps, 0.0)
}

/// Same as [`finite_diff_check`] but adds `perturb` to the first analytic
/// gradient coordinate before comparing — a test fixture simulating a broken
/// backward implementation.
pub fn finite_diff_check_perturbed<S: Scalar, F>(
    f: &F,
    x: &Tensor<S>,
    eps: f64,
    perturb: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<S>, Var) -> Result<Var, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            msg: format!("f must be scalar-valued, got shape {:?}", tape.shape(y)),
        });
    }
    tape.backward(y)?;
    let mut analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    if perturb != 0.0 && !analytic.is_empty() {
        analytic[0] += perturb;
    }

    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let eval = |data: &[S]| -> Result<f64, TensorError> {
        let mut t = Tape::forward_only();
        let xv = t.leaf_slice(&shape, data, false)?;
        let y = f(&mut t, xv)?;
        Ok(t.data(y)[0].as_f64())
    };

    let mut max_err = 0.0f64;
    let mut work = base.clone();
    for i in 0..base.len() {
        let x0 = base[i].as_f64();
        work[i] = S::from_f64(x0 + eps);
        let fp = eval(&work)?;
        work[i] = S::from_f64(x0 - eps);
        let fm = eval(&work)?;
        work[i] = base[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OpCheck {
    pub fn from_err(name: &str, max_rel_err: f64, tolerance: f64) -> Self {
        OpCheck {
            name: name.to_string(),
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&OpCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Fixed-width text table: op, max relative error, tolerance, verdict.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>14} {:>10} {:>8}\n",
            "check", "max rel err", "tol", "result"
        ));
        for c in &self.checks {
            s.push_str(&format!(
                "{:<28} {:>14.3e} {:>10.1e} {:>8}\n",
                c.name,
                c.max_rel_err,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

type ScalarFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>>;

/// Randomized finite-difference trials for every differentiable tensor op.
pub struct GradCheckSuite {
    pub seed: u64,
    pub trials: usize,
    pub corrupt: Option<String>,
}

impl GradCheckSuite {
    pub fn new(seed: u64) -> Self {
        GradCheckSuite {
            seed,
            trials: 20,
            corrupt: None,
        }
    }

    pub fn with_corrupted_op(mut self, name: &str) -> Self {
        self.corrupt = Some(name.to_string());
        self
    }

    fn perturb_for(&self, name: &str) -> f64 {
        if self.corrupt.as_deref() == Some(name) {
            0.05
        } else {
            0.0
        }
    }

    /// Run all tensor-op checks and collect one entry per op.
    pub fn run_tensor_ops(&self) -> Vec<OpCheck> {
        let mut checks = Vec::new();
        let mut rng = RngStream::new(self.seed, "gradcheck.tensor-ops");

        let mut run = |name: &str,
                       rng: &mut RngStream,
                       make: &mut dyn FnMut(&mut RngStream, usize) -> (Tensor<f64>, ScalarFn)|
         -> () {
            let perturb = self.perturb_for(name);
            let mut worst = 0.0f64;
            for t in 0..self.trials {
                let (x, f) = make(rng, t);
                let err = finite_diff_check_perturbed(&f, &x, DEFAULT_EPS, perturb)
                    .unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            checks.push(OpCheck::from_err(name, worst, OP_TOLERANCE));
        };

        fn coefs(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
            Tensor::rand_uniform(shape, -1.0, 1.0, rng)
        }

        // weighted sum reducer so every output coordinate carries a distinct
        // gradient signal
        fn wsum(tape: &mut Tape<f64>, y: Var, c: &Tensor<f64>) -> Result<Var, TensorError> {
            let cv = tape.leaf(c.clone());
            let m = tape.mul(y, cv)?;
            tape.sum_all(m)
        }

        // ── elementwise binary, including broadcast layouts ──────────
        for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3)] {
            run(name, &mut rng, &mut |rng, t| {
                let (sa, sb): (Vec<usize>, Vec<usize>) = match t % 3 {
                    0 => (vec![2, 3], vec![2, 3]),
                    1 => (vec![2, 1, 4], vec![2, 3, 4]),
                    _ => (vec![3, 4], vec![4]),
                };
                // keep divisors away from zero
                let other = if which == 3 {
                    let mut o = Tensor::<f64>::rand_uniform(&sb, 0.4, 1.6, rng);
                    for v in o.data_mut() {
                        if rng.uniform() < 0.5 {
                            *v = -*v;
                        }
                    }
                    o
                } else {
                    Tensor::rand_uniform(&sb, -1.0, 1.0, rng)
                };
                let x = Tensor::rand_uniform(&sa, -1.0, 1.0, rng);
                let out_shape =
                    super::broadcast_shape("check", x.shape(), other.shape()).unwrap();
                let c = coefs(rng, &out_shape);
                let f: ScalarFn = Box::new(move |tape, xv| {
                    let ov = tape.leaf(other.clone());
                    let y = match which {
                        0 => tape.add(xv, ov)?,
                        1 => tape.sub(xv, ov)?,
                        2 => tape.mul(xv, ov)?,
                        _ => tape.div(xv, ov)?,
                    };
                    wsum(tape, y, &c)
                });
                (x, f)
            });
        }

        // gradient with respect to the second (possibly broadcast) operand
        run("binary_rhs", &mut rng, &mut |rng, t| {
            let lhs = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let sb: Vec<usize> = if t % 2 == 0 { vec![2, 1, 4] } else { vec![4] };
            let x = Tensor::rand_uniform(&sb, 0.4, 1.4, rng);
            let c = coefs(rng, &[2, 3, 4]);
            let use_div = t % 3 == 0;
            let f: ScalarFn = Box::new(move |tape, xv| {
                let lv = tape.leaf(lhs.clone());
                let y = if use_div {
                    tape.div(lv, xv)?
                } else {
                    tape.mul(lv, xv)?
                };
                wsum(tape, y, &c)
            });
            (x, f)
        });

        // ── unary ────────────────────────────────────────────────────
        let unary_cases: [(&str, fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>, f64, f64); 6] = [
            ("neg", |t, v| t.neg(v), -1.5, 1.5),
            ("exp", |t, v| t.exp(v), -1.5, 1.5),
            ("log", |t, v| t.log(v), 0.2, 2.0),
            ("sigmoid", |t, v| t.sigmoid(v), -2.0, 2.0),
            ("relu", |t, v| t.relu(v), 0.05, 1.5),
            ("gelu", |t, v| t.gelu(v), -2.0, 2.0),
        ];
        for (name, op, lo, hi) in unary_cases {
            run(name, &mut rng, &mut |rng, t| {
                let mut x = Tensor::<f64>::rand_uniform(&[3, 5], lo, hi, rng);
                // relu: random sign but keep inputs away from the kink
                if name == "relu" && t % 2 == 0 {
                    for v in x.data_mut() {
                        if rng.uniform() < 0.5 {
                            *v = -*v;
                        }
                    }
                }
                let c = coefs(rng, &[3, 5]);
                let f: ScalarFn = Box::new(move |tape, xv| {
                    let y = op(tape, xv)?;
                    wsum(tape, y, &c)
                });
                (x, f)
            });
        }

        run("scale", &mut rng, &mut |rng, _| {
            let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, rng);
            let c = coefs(rng, &[4, 3]);
            let k = rng.uniform_in(-2.0, 2.0);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.scale(xv, k)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        // ── matmul, both operands ────────────────────────────────────
        run("matmul", &mut rng, &mut |rng, t| {
            let (m, k, n) = (3, 4, 2);
            let check_a = t % 2 == 0;
            let a = Tensor::rand_uniform(&[m, k], -1.0, 1.0, rng);
            let b = Tensor::rand_uniform(&[k, n], -1.0, 1.0, rng);
            let c = coefs(rng, &[m, n]);
            if check_a {
                let f: ScalarFn = Box::new(move |tape, xv| {
                    let bv = tape.leaf(b.clone());
                    let y = tape.matmul(xv, bv)?;
                    wsum(tape, y, &c)
                });
                (a, f)
            } else {
                let f: ScalarFn = Box::new(move |tape, xv| {
                    let av = tape.leaf(a.clone());
                    let y = tape.matmul(av, xv)?;
                    wsum(tape, y, &c)
                });
                (b, f)
            }
        });

        // ── conv1d variants; trials rotate through x / w / bias ──────
        let conv_cases: [(&str, usize, usize, usize, usize, usize); 4] = [
            // name, c_in, c_out, k, dilation, groups
            ("conv1d", 3, 4, 3, 1, 1),
            ("conv1d_dilated", 2, 3, 5, 2, 1),
            ("conv1d_grouped", 4, 6, 3, 1, 2),
            ("conv1d_depthwise", 4, 4, 3, 2, 4),
        ];
        for (name, c_in, c_out, k, dil, groups) in conv_cases {
            run(name, &mut rng, &mut |rng, t| {
                let (b, tt) = (2usize, 9usize);
                let x = Tensor::rand_uniform(&[b, c_in, tt], -1.0, 1.0, rng);
                let w = Tensor::rand_uniform(&[c_out, c_in / groups, k], -0.8, 0.8, rng);
                let bias = Tensor::rand_uniform(&[c_out], -0.5, 0.5, rng);
                let c = coefs(rng, &[b, c_out, tt]);
                match t % 3 {
                    0 => {
                        let f: ScalarFn = Box::new(move |tape, xv| {
                            let wv = tape.leaf(w.clone());
                            let bv = tape.leaf(bias.clone());
                            let y = tape.conv1d(xv, wv, Some(bv), dil, groups)?;
                            wsum(tape, y, &c)
                        });
                        (x, f)
                    }
                    1 => {
                        let f: ScalarFn = Box::new(move |tape, wv| {
                            let xv = tape.leaf(x.clone());
                            let bv = tape.leaf(bias.clone());
                            let y = tape.conv1d(xv, wv, Some(bv), dil, groups)?;
                            wsum(tape, y, &c)
                        });
                        (w, f)
                    }
                    _ => {
                        let f: ScalarFn = Box::new(move |tape, bv| {
                            let xv = tape.leaf(x.clone());
                            let wv = tape.leaf(w.clone());
                            let y = tape.conv1d(xv, wv, Some(bv), dil, groups)?;
                            wsum(tape, y, &c)
                        });
                        (bias, f)
                    }
                }
            });
        }

        // ── batch norm, train and eval modes ─────────────────────────
        for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
            run(name, &mut rng, &mut |rng, t| {
                let (b, ch, tt) = (2usize, 3usize, 5usize);
                let x = Tensor::rand_uniform(&[b, ch, tt], -1.5, 1.5, rng);
                let gamma = Tensor::rand_uniform(&[ch], 0.5, 1.5, rng);
                let beta = Tensor::rand_uniform(&[ch], -0.5, 0.5, rng);
                let rm: Vec<f64> = (0..ch).map(|_| rng.uniform_in(-0.3, 0.3)).collect();
                let rv: Vec<f64> = (0..ch).map(|_| rng.uniform_in(0.5, 1.5)).collect();
                let c = coefs(rng, &[b, ch, tt]);
                let under_test = t % 3;
                let probe = match under_test {
                    0 => x.clone(),
                    1 => gamma.clone(),
                    _ => beta.clone(),
                };
                let f: ScalarFn = Box::new(move |tape, var| {
                    let xv = if under_test == 0 {
                        var
                    } else {
                        tape.leaf(x.clone())
                    };
                    let gv = if under_test == 1 {
                        var
                    } else {
                        tape.leaf(gamma.clone())
                    };
                    let bv = if under_test == 2 {
                        var
                    } else {
                        tape.leaf(beta.clone())
                    };
                    let mut rm = rm.clone();
                    let mut rv = rv.clone();
                    let y = tape.batch_norm(xv, gv, bv, &mut rm, &mut rv, mode, 0.1, 1e-5)?;
                    wsum(tape, y, &c)
                });
                (probe, f)
            });
        }

        // ── dropout (training mode, fixed counters) ──────────────────
        run("dropout", &mut rng, &mut |rng, t| {
            let x = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, rng);
            let c = coefs(rng, &[4, 6]);
            let step = t as u64;
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.dropout(xv, 0.3, 11, 5, step, Mode::Train)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        // ── softmax ──────────────────────────────────────────────────
        run("softmax", &mut rng, &mut |rng, t| {
            let axis = t % 2;
            let x = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, rng);
            let c = coefs(rng, &[3, 4]);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.softmax(xv, axis)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        // ── reductions and shape ops ─────────────────────────────────
        run("sum_axis", &mut rng, &mut |rng, t| {
            let axis = t % 3;
            let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let mut out_shape = vec![2, 3, 4];
            out_shape.remove(axis);
            let c = coefs(rng, &out_shape);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.sum_axis(xv, axis, false)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        run("mean_axis", &mut rng, &mut |rng, _| {
            let x = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, rng);
            let c = coefs(rng, &[3]);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.mean_axis(xv, 1, false)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        run("sum_all", &mut rng, &mut |rng, _| {
            let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, rng);
            let f: ScalarFn = Box::new(move |tape, xv| tape.sum_all(xv));
            (x, f)
        });

        run("narrow", &mut rng, &mut |rng, t| {
            let x = Tensor::rand_uniform(&[2, 6, 3], -1.0, 1.0, rng);
            let start = t % 3;
            let c = coefs(rng, &[2, 3, 3]);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.narrow(xv, 1, start, 3)?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        run("concat", &mut rng, &mut |rng, t| {
            let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let other = Tensor::rand_uniform(&[2, 2, 4], -1.0, 1.0, rng);
            let first = t % 2 == 0;
            let c = coefs(rng, &[2, 5, 4]);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let ov = tape.leaf(other.clone());
                let y = if first {
                    tape.concat(xv, ov, 1)?
                } else {
                    tape.concat(ov, xv, 1)?
                };
                wsum(tape, y, &c)
            });
            (x, f)
        });

        run("reshape", &mut rng, &mut |rng, _| {
            let x = Tensor::rand_uniform(&[2, 6], -1.0, 1.0, rng);
            let c = coefs(rng, &[3, 4]);
            let f: ScalarFn = Box::new(move |tape, xv| {
                let y = tape.reshape(xv, &[3, 4])?;
                wsum(tape, y, &c)
            });
            (x, f)
        });

        // ── losses ───────────────────────────────────────────────────
        run("weighted_ce_logits", &mut rng, &mut |rng, _| {
            let (b, cls) = (3usize, 5usize);
            let x = Tensor::rand_uniform(&[b, cls], -2.0, 2.0, rng);
            let targets: Vec<usize> = (0..b).map(|_| rng.below(cls as u64) as usize).collect();
            let weights: Vec<f64> = (0..b).map(|_| rng.uniform_in(0.2, 3.0)).collect();
            let f: ScalarFn =
                Box::new(move |tape, xv| tape.weighted_ce_logits(xv, &targets, &weights));
            (x, f)
        });

        run("weighted_ce_probs", &mut rng, &mut |rng, _| {
            let (b, cls) = (3usize, 5usize);
            // build strictly positive rows summing to 1
            let mut data = Vec::with_capacity(b * cls);
            for _ in 0..b {
                let raw: Vec<f64> = (0..cls).map(|_| rng.uniform_in(0.1, 1.0)).collect();
                let s: f64 = raw.iter().sum();
                data.extend(raw.into_iter().map(|v| v / s));
            }
            let x = Tensor::new(vec![b, cls], data).unwrap();
            let targets: Vec<usize> = (0..b).map(|_| rng.below(cls as u64) as usize).collect();
            let weights: Vec<f64> = (0..b).map(|_| rng.uniform_in(0.2, 3.0)).collect();
            let f: ScalarFn =
                Box::new(move |tape, xv| tape.weighted_ce_probs(xv, &targets, &weights));
            (x, f)
        });

        checks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_f64_slice(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let err = finite_diff_check(
            |tape, xv| {
                let y = tape.scale(xv, 2.5)?;
                tape.sum_all(y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        // exact up to the rounding of x±eps itself
        assert!(err < 1e-10, "linear f should be exact, got {err}");
    }

    #[test]
    fn quadratic_function_small_error() {
        let x = Tensor::<f64>::from_f64_slice(&[3], &[0.7, -1.3, 2.1]).unwrap();
        let err = finite_diff_check(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                tape.sum_all(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic f central diff error {err}");
    }

    #[test]
    fn conv_softmax_composite_under_tolerance() {
        let mut rng = RngStream::new(17, "composite");
        let x = Tensor::<f64>::rand_uniform(&[1, 2, 7], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[3, 2, 3], -0.7, 0.7, &mut rng);
        let c = Tensor::<f64>::rand_uniform(&[1, 3, 7], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            move |tape, xv| {
                let wv = tape.leaf(w.clone());
                let y = tape.conv1d(xv, wv, None, 1, 1)?;
                let s = tape.softmax(y, 2)?;
                let cv = tape.leaf(c.clone());
                let m = tape.mul(s, cv)?;
                tape.sum_all(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "composite error {err}");
    }

    #[test]
    fn suite_passes_on_all_ops() {
        let checks = GradCheckSuite::new(20260809).run_tensor_ops();
        assert!(checks.len() > 20);
        let report = GradCheckReport { checks };
        assert!(
            report.all_passed(),
            "failures:\n{}",
            report.to_table()
        );
    }

    #[test]
    fn corrupted_conv_backward_is_detected_and_named() {
        let checks = GradCheckSuite::new(20260809)
            .with_corrupted_op("conv1d")
            .run_tensor_ops();
        let report = GradCheckReport { checks };
        assert!(!report.all_passed());
        let failures = report.failures();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].name, "conv1d");
    }

    #[test]
    fn rejects_non_scalar_f() {
        let x = Tensor::<f64>::from_f64_slice(&[2], &[1.0, 2.0]).unwrap();
        let res = finite_diff_check(|tape, xv| tape.scale(xv, 1.0), &x, 1e-5);
        assert!(res.is_err());
    }
}
