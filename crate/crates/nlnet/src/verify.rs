//! Runnable verification suites: oracle equivalence, gradient fidelity,
//! identity-at-init, self-attention equivalence, inflation equivalence, and
//! cost-accounting identities. The CLI `verify` command executes these; the
//! acceptance tests assert on their reports.

use crate::backbone::{
    build_network, inflate, insert_nonlocal, load_network, save_network, InsertPolicy, Inflation,
    NetworkSpec, NonLocalSettings, StageItem,
};
use crate::cost::{count_block_cost, count_network_cost};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check_multi;
use crate::layers::{ForwardCtx, ParamKind, RunMode};
use crate::mask::MaskMode;
use crate::nonlocal::{
    block_forward, nonlocal_forward, nonlocal_forward_bound, BoundNonLocal, NonLocalConfig,
    NonLocalParams,
};
use crate::oracle::{self, OracleBn};
use crate::pairwise::PairwiseKind;
use crate::tape::{ConvSpec, PoolGeom, Tape, TensorId, TimePad};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// One verified property: pass iff measured <= tolerance.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub scope: &'static str,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "== scope {} ==", self.scope);
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            let _ = write!(s, "[{status}] {:<52} {:>12.3e} <= {:.1e}", c.name, c.measured, c.tolerance);
            if c.detail.is_empty() {
                let _ = writeln!(s);
            } else {
                let _ = writeln!(s, "  ({})", c.detail);
            }
        }
        let n_fail = self.failures().len();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), n_fail);
        s
    }
}

/// Verification knobs. `softmax_grad_fault` perturbs the softmax backward
/// pass so tests can confirm the suite catches a broken gradient; it must be
/// None for a real verification run.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub softmax_grad_fault: Option<f64>,
}

fn rng(n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(n)
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn new() -> Self {
        Suite { checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, tolerance: f64, f: impl FnOnce() -> Result<f64>) {
        let name = name.into();
        match f() {
            Ok(measured) => self.checks.push(Check {
                pass: measured <= tolerance,
                name,
                measured,
                tolerance,
                detail: String::new(),
            }),
            Err(e) => self.checks.push(Check {
                name,
                measured: f64::INFINITY,
                tolerance,
                pass: false,
                detail: e.to_string(),
            }),
        }
    }

    /// Passes iff the closure returns a configuration error.
    fn check_rejects(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<()>) {
        let name = name.into();
        let (pass, detail) = match f() {
            Err(Error::Config(msg)) => (true, msg),
            Err(e) => (false, format!("wrong error kind: {e}")),
            Ok(()) => (false, "accepted a forbidden configuration".to_string()),
        };
        self.checks.push(Check {
            name,
            measured: if pass { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass,
            detail,
        });
    }
}

// ── ops scope ───────────────────────────────────────────────────────────

pub fn verify_ops(opts: &VerifyOptions) -> VerifyReport {
    let mut s = Suite::new();

    s.check("ops/matmul/identity", 0.0, || {
        let mut tape = Tape::<f64>::new();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::rand_uniform(vec![3, 7], -1.0, 1.0, &mut rng(100));
        let a = tape.leaf(eye)?;
        let b = tape.leaf(x.clone())?;
        let c = tape.matmul(a, b)?;
        Ok(tape.value(c).max_abs_diff(&x))
    });

    s.check("ops/matmul/triple_loop_oracle", 1e-12, || {
        let mut r = rng(101);
        let a = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(a.clone())?, tape.leaf(b.clone())?);
        let ic = tape.matmul(ia, ib)?;
        Ok(tape.value(ic).max_abs_diff(&oracle::naive_matmul(&a, &b)))
    });

    s.check("ops/matmul/small_extent_sweep", 1e-10, || {
        let mut worst = 0.0f64;
        let mut r = rng(102);
        for (m, k, n) in [(1, 1, 1), (2, 6, 3), (6, 6, 6), (5, 2, 4)] {
            let a = Tensor::<f64>::rand_uniform(vec![m, k], -1.0, 1.0, &mut r);
            let b = Tensor::<f64>::rand_uniform(vec![k, n], -1.0, 1.0, &mut r);
            let mut tape = Tape::new();
            let (ia, ib) = (tape.leaf(a.clone())?, tape.leaf(b.clone())?);
            let ic = tape.matmul(ia, ib)?;
            worst = worst.max(tape.value(ic).max_abs_diff(&oracle::naive_matmul(&a, &b)));
        }
        Ok(worst)
    });

    s.check("ops/softmax/uniform_row", 1e-12, || {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3]))?;
        let p = tape.softmax_rows(x, None)?;
        Ok(tape
            .value(p)
            .data()
            .iter()
            .map(|v| (v - 1.0 / 3.0).abs())
            .fold(0.0, f64::max))
    });

    s.check("ops/softmax/large_score_stability", 1e-12, || {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1000.0, 0.0])?)?;
        let p = tape.softmax_rows(x, None)?;
        let row = tape.value(p).data();
        Ok((row[0] - 1.0).abs().max(row[1]))
    });

    s.check("ops/softmax/naive_formula_oracle", 1e-12, || {
        let x = Tensor::<f64>::rand_uniform(vec![5, 7], -2.0, 2.0, &mut rng(103));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone())?;
        let ip = tape.softmax_rows(ix, None)?;
        Ok(tape.value(ip).max_abs_diff(&oracle::naive_softmax_rows(&x)))
    });

    s.check("ops/softmax/rows_sum_to_one", 1e-12, || {
        let x = Tensor::<f64>::rand_uniform(vec![6, 9], -3.0, 3.0, &mut rng(104));
        let mut tape = Tape::new();
        let ix = tape.leaf(x)?;
        let ip = tape.softmax_rows(ix, None)?;
        let p = tape.value(ip).data();
        let mut worst = 0.0f64;
        for i in 0..6 {
            let sum: f64 = p[i * 9..(i + 1) * 9].iter().sum();
            worst = worst.max((sum - 1.0).abs());
            for &v in &p[i * 9..(i + 1) * 9] {
                if !(0.0..=1.0).contains(&v) {
                    worst = worst.max(1.0);
                }
            }
        }
        Ok(worst)
    });

    s.check("ops/conv3d/identity_kernel", 0.0, || {
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3, 1], -1.0, 1.0, &mut rng(105));
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0])?;
        let mut tape = Tape::new();
        let (ix, iw) = (tape.leaf(x.clone())?, tape.leaf(w)?);
        let iy = tape.conv3d(
            ix,
            iw,
            ConvSpec {
                stride: [1, 1, 1],
                pad: [0, 0, 0],
                time_pad: TimePad::Zero,
            },
        )?;
        Ok(tape.value(iy).max_abs_diff(&x))
    });

    s.check("ops/conv3d/per_frame_2d_oracle", 1e-10, || {
        let mut r = rng(106);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 5, 5, 2], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![1, 3, 3, 2, 3], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (ix, iw) = (tape.leaf(x.clone())?, tape.leaf(w.clone())?);
        let iy = tape.conv3d(
            ix,
            iw,
            ConvSpec {
                stride: [1, 1, 1],
                pad: [0, 1, 1],
                time_pad: TimePad::Zero,
            },
        )?;
        Ok(tape
            .value(iy)
            .max_abs_diff(&oracle::naive_conv_per_frame_2d(&x, &w, [1, 1], [1, 1])))
    });

    s.check("ops/conv3d/constant_field_27_taps", 1e-12, || {
        let c = 0.41;
        let x = Tensor::<f64>::full(vec![1, 3, 5, 5, 1], c);
        let w = Tensor::<f64>::full(vec![3, 3, 3, 1, 1], 1.0);
        let mut tape = Tape::new();
        let (ix, iw) = (tape.leaf(x)?, tape.leaf(w)?);
        let iy = tape.conv3d(
            ix,
            iw,
            ConvSpec {
                stride: [1, 1, 1],
                pad: [1, 1, 1],
                time_pad: TimePad::Replicate,
            },
        )?;
        let out = tape.value(iy);
        let d = out.dims().to_vec();
        let mut worst = 0.0f64;
        for t in 0..d[1] {
            for h in 1..d[2] - 1 {
                for w2 in 1..d[3] - 1 {
                    let v = out.data()[((t * d[2] + h) * d[3] + w2) * d[4]];
                    worst = worst.max((v - 27.0 * c).abs());
                }
            }
        }
        Ok(worst)
    });

    s.check("ops/max_pool/window_one_identity", 0.0, || {
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3, 2], -1.0, 1.0, &mut rng(107));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone())?;
        let iy = tape.max_pool3d(
            ix,
            PoolGeom {
                window: [1, 1, 1],
                stride: [1, 1, 1],
                pad: [0, 0, 0],
            },
        )?;
        Ok(tape.value(iy).max_abs_diff(&x))
    });

    s.check("ops/max_pool/constant_field", 0.0, || {
        let x = Tensor::<f64>::full(vec![1, 4, 4, 4, 2], 0.7);
        let mut tape = Tape::new();
        let ix = tape.leaf(x)?;
        let iy = tape.max_pool3d(
            ix,
            PoolGeom {
                window: [3, 3, 3],
                stride: [2, 2, 2],
                pad: [1, 1, 1],
            },
        )?;
        Ok(tape
            .value(iy)
            .data()
            .iter()
            .map(|v| (v - 0.7).abs())
            .fold(0.0, f64::max))
    });

    s.check("ops/max_pool/loop_oracle", 0.0, || {
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4, 1], -1.0, 1.0, &mut rng(108));
        let geom = PoolGeom {
            window: [1, 2, 2],
            stride: [1, 2, 2],
            pad: [0, 0, 0],
        };
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone())?;
        let iy = tape.max_pool3d(ix, geom)?;
        Ok(tape
            .value(iy)
            .max_abs_diff(&oracle::naive_max_pool3d(&x, geom.window, geom.stride, geom.pad)))
    });

    add_grad_checks(&mut s, opts);

    s.check("ops/grad/replay_determinism", 0.0, || {
        let run = || -> Result<Vec<u64>> {
            let mut r = rng(109);
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r))?;
            let b = tape.leaf(Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut r))?;
            let c = tape.matmul(a, b)?;
            let p = tape.softmax_rows(c, None)?;
            let l = tape.sum_all(p)?;
            tape.backward(l)?;
            Ok(tape.grad(a).expect("grad").iter().map(|v| v.to_bits()).collect())
        };
        Ok(if run()? == run()? { 0.0 } else { 1.0 })
    });

    VerifyReport {
        scope: "ops",
        checks: s.checks,
    }
}

/// Deterministic tensor with entries bounded away from zero, for kinked ops.
fn away_from_zero(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::rand_uniform(dims, 0.2, 1.0, &mut rng(seed));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    t
}

fn add_grad_checks(s: &mut Suite, opts: &VerifyOptions) {
    let tol = 1e-4;
    let eps = 1e-5;

    s.check("ops/grad/matmul", tol, || {
        let mut r = rng(120);
        let a = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![4, 2], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                t.sum_all(c)
            },
            &[a, b],
            eps,
        )
    });

    s.check("ops/grad/matmul_nt", tol, || {
        let mut r = rng(121);
        let a = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![5, 4], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let s0 = t.matmul_nt(ids[0], ids[1])?;
                let m = t.mul_elem(s0, ids[2])?;
                t.sum_all(m)
            },
            &[a, b, c],
            eps,
        )
    });

    s.check("ops/grad/add_and_bias", tol, || {
        let mut r = rng(122);
        let a = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let bias = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let s0 = t.add(ids[0], ids[1])?;
                let s1 = t.add_bias(s0, ids[2])?;
                let m = t.mul_elem(s1, ids[3])?;
                t.sum_all(m)
            },
            &[a, b, bias, c],
            eps,
        )
    });

    s.check("ops/grad/square_sum_quadratic", 1e-9, || {
        let x = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng(123));
        grad_check_multi(
            |t, ids| {
                let sq = t.mul_elem(ids[0], ids[0])?;
                t.sum_all(sq)
            },
            &[x],
            eps,
        )
    });

    s.check("ops/grad/relu", tol, || {
        let x = away_from_zero(vec![3, 5], 124);
        let c = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng(125));
        grad_check_multi(
            |t, ids| {
                let y = t.relu(ids[0])?;
                let m = t.mul_elem(y, ids[1])?;
                t.sum_all(m)
            },
            &[x, c],
            eps,
        )
    });

    // softmax gets a dedicated path so a deliberate backward fault can be
    // injected by tests
    let fault = opts.softmax_grad_fault;
    s.check("ops/grad/softmax_rows", tol, move || {
        softmax_grad_check(fault, None, 126)
    });
    s.check("ops/grad/masked_softmax_rows", tol, move || {
        let mask: Vec<bool> = (0..4 * 5).map(|i| i % 3 != 0).collect();
        softmax_grad_check(fault, Some(std::sync::Arc::new(mask)), 127)
    });

    s.check("ops/grad/div_row_count", tol, || {
        let mut r = rng(128);
        let x = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut r);
        let mask: Vec<bool> = (0..20).map(|i| i % 4 != 2).collect();
        let mask = std::sync::Arc::new(mask);
        grad_check_multi(
            |t, ids| {
                let y = t.div_row_count(ids[0], Some(mask.clone()))?;
                let m = t.mul_elem(y, ids[1])?;
                t.sum_all(m)
            },
            &[x, c],
            eps,
        )
    });

    s.check("ops/grad/outer_add", tol, || {
        let mut r = rng(129);
        let u = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut r);
        let v = Tensor::<f64>::rand_uniform(vec![3], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let y = t.outer_add(ids[0], ids[1])?;
                let m = t.mul_elem(y, ids[2])?;
                t.sum_all(m)
            },
            &[u, v, c],
            eps,
        )
    });

    for (name, kernel, pad, stride, time_pad) in [
        ("ops/grad/conv3d_zero_pad", [1usize, 3, 3], [0usize, 1, 1], [1usize, 1, 1], TimePad::Zero),
        ("ops/grad/conv3d_replicate", [3, 3, 3], [1, 1, 1], [1, 1, 1], TimePad::Replicate),
        ("ops/grad/conv3d_strided", [1, 3, 3], [0, 1, 1], [1, 2, 2], TimePad::Zero),
    ] {
        s.check(name, tol, move || {
            let mut r = rng(130 + kernel[0] as u64 + stride[1] as u64);
            let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4, 2], -1.0, 1.0, &mut r);
            let w = Tensor::<f64>::rand_uniform(
                vec![kernel[0], kernel[1], kernel[2], 2, 2],
                -1.0,
                1.0,
                &mut r,
            );
            let spec = ConvSpec {
                stride,
                pad,
                time_pad,
            };
            grad_check_multi(
                |t, ids| {
                    let y = t.conv3d(ids[0], ids[1], spec)?;
                    t.sum_all(y)
                },
                &[x, w],
                eps,
            )
        });
    }

    s.check("ops/grad/max_pool", tol, || {
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4, 2], -1.0, 1.0, &mut rng(133));
        grad_check_multi(
            |t, ids| {
                let y = t.max_pool3d(
                    ids[0],
                    PoolGeom {
                        window: [2, 2, 2],
                        stride: [2, 2, 2],
                        pad: [0, 0, 0],
                    },
                )?;
                t.sum_all(y)
            },
            &[x],
            eps,
        )
    });

    s.check("ops/grad/batch_norm_train", tol, || {
        let mut r = rng(134);
        let x = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let gamma = Tensor::<f64>::rand_uniform(vec![3], 0.5, 1.5, &mut r);
        let beta = Tensor::<f64>::rand_uniform(vec![3], -0.5, 0.5, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let (y, _, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                let m = t.mul_elem(y, ids[3])?;
                t.sum_all(m)
            },
            &[x, gamma, beta, c],
            eps,
        )
    });

    s.check("ops/grad/batch_norm_eval", tol, || {
        let mut r = rng(135);
        let x = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let gamma = Tensor::<f64>::rand_uniform(vec![3], 0.5, 1.5, &mut r);
        let beta = Tensor::<f64>::rand_uniform(vec![3], -0.5, 0.5, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let mean = vec![0.1, -0.2, 0.05];
        let var = vec![0.9, 1.1, 1.4];
        grad_check_multi(
            move |t, ids| {
                let y = t.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
                let m = t.mul_elem(y, ids[3])?;
                t.sum_all(m)
            },
            &[x, gamma, beta, c],
            eps,
        )
    });

    s.check("ops/grad/dropout_fixed_mask", tol, || {
        let x = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut rng(136));
        grad_check_multi(
            |t, ids| {
                // reseed per call so every evaluation sees the same mask
                let mut mask_rng = rng(137);
                let y = t.dropout(ids[0], 0.5, &mut mask_rng)?;
                t.sum_all(y)
            },
            &[x],
            eps,
        )
    });

    s.check("ops/grad/global_avg_pool", tol, || {
        let mut r = rng(138);
        let x = Tensor::<f64>::rand_uniform(vec![2, 2, 3, 3, 4], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![2, 4], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let y = t.global_avg_pool(ids[0])?;
                let m = t.mul_elem(y, ids[1])?;
                t.sum_all(m)
            },
            &[x, c],
            eps,
        )
    });

    s.check("ops/grad/linear", tol, || {
        let mut r = rng(139);
        let x = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![4, 2], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![2], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![3, 2], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let xw = t.matmul(ids[0], ids[1])?;
                let y = t.add_bias(xw, ids[2])?;
                let m = t.mul_elem(y, ids[3])?;
                t.sum_all(m)
            },
            &[x, w, b, c],
            eps,
        )
    });

    s.check("ops/grad/cross_entropy_of_softmax", 1e-6, || {
        let logits = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng(140));
        grad_check_multi(|t, ids| t.cross_entropy(ids[0], &[0, 3, 2]), &[logits], eps)
    });

    s.check("ops/grad/reshape_permute", tol, || {
        let mut r = rng(141);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![4, 6], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let p = t.permute(ids[0], &[2, 0, 1])?;
                let f = t.reshape(p, vec![4, 6])?;
                let m = t.mul_elem(f, ids[1])?;
                t.sum_all(m)
            },
            &[x, c],
            eps,
        )
    });

    s.check("ops/grad/narrow_concat", tol, || {
        let mut r = rng(142);
        let x = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        grad_check_multi(
            |t, ids| {
                let a = t.narrow_rows(ids[0], 0, 2)?;
                let b = t.narrow_rows(ids[0], 2, 4)?;
                let y = t.concat_rows(&[b, a])?;
                let m = t.mul_elem(y, ids[1])?;
                t.sum_all(m)
            },
            &[x, c],
            eps,
        )
    });
}

/// Softmax gradient check with an optional injected backward fault on the
/// analytic pass.
fn softmax_grad_check(
    fault: Option<f64>,
    mask: Option<std::sync::Arc<Vec<bool>>>,
    seed: u64,
) -> Result<f64> {
    let mut r = rng(seed);
    let x = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut r);
    let c = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut r);
    let build = |tape: &mut Tape<f64>, xv: &Tensor<f64>| -> Result<(TensorId, TensorId)> {
        let ix = tape.leaf(xv.clone())?;
        let ic = tape.leaf(c.clone())?;
        let p = tape.softmax_rows(ix, mask.clone())?;
        let m = tape.mul_elem(p, ic)?;
        let l = tape.sum_all(m)?;
        Ok((ix, l))
    };
    // analytic pass, possibly faulted
    let mut tape = Tape::new();
    tape.softmax_grad_fault = fault;
    let (ix, loss) = build(&mut tape, &x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(ix).expect("grad").to_vec();
    // central differences
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let eval = |delta: f64| -> Result<f64> {
            let mut x2 = x.clone();
            x2.data_mut()[i] += delta;
            let mut t2 = Tape::new();
            let (_, l) = build(&mut t2, &x2)?;
            Ok(t2.value(l).data()[0])
        };
        let central = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(central.abs());
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}

// ── block scope ─────────────────────────────────────────────────────────

const ALL_MASKS: [MaskMode; 3] = [MaskMode::Spacetime, MaskMode::SpaceOnly, MaskMode::TimeOnly];

/// Random "pretend-trained" block parameters: random embeddings, random W_z,
/// and a random batch-norm affine with random running statistics.
fn trained_params(cfg: &NonLocalConfig, seed: u64) -> Result<NonLocalParams<f64>> {
    let mut r = rng(seed);
    let mut p = NonLocalParams::init("nl", cfg, &mut r)?;
    let c = cfg.channels_in;
    p.w_z = Tensor::randn(vec![cfg.bottleneck, c], 0.5, &mut r);
    p.bn.gamma = Tensor::rand_uniform(vec![c], 0.5, 1.5, &mut r);
    p.bn.beta = Tensor::rand_uniform(vec![c], -0.3, 0.3, &mut r);
    p.bn.running_mean = Tensor::rand_uniform(vec![c], -0.2, 0.2, &mut r);
    p.bn.running_var = Tensor::rand_uniform(vec![c], 0.5, 1.5, &mut r);
    Ok(p)
}

fn block_eval(x: &Tensor<f64>, p: &NonLocalParams<f64>, cfg: &NonLocalConfig) -> Result<Tensor<f64>> {
    let mut p = p.clone();
    let mut tape = Tape::new();
    let d = x.dims().to_vec();
    let xid = tape.leaf(x.reshaped(vec![1, d[0], d[1], d[2], d[3]])?)?;
    let z = block_forward(&mut tape, xid, &mut p, cfg, RunMode::Eval)?;
    tape.value(z).reshaped(d)
}

pub fn verify_block() -> VerifyReport {
    let mut s = Suite::new();

    // the full oracle matrix: kinds x masks x subsample, >= 10 inputs per cell
    for kind in PairwiseKind::ALL {
        for mask in ALL_MASKS {
            for sub in [1usize, 2] {
                let cell = format!(
                    "block/oracle/{}/{}/sub{}",
                    kind.as_str(),
                    mask.as_str(),
                    sub
                );
                if mask == MaskMode::TimeOnly && sub == 2 {
                    s.check_rejects(format!("block/reject/time_only_sub2/{}", kind.as_str()), || {
                        let mut cfg = NonLocalConfig::new(kind, 4);
                        cfg.mask = mask;
                        cfg.subsample_spatial = sub;
                        cfg.validate()
                    });
                    continue;
                }
                s.check(cell, 1e-8, move || {
                    let mut worst = 0.0f64;
                    for i in 0..10u64 {
                        let t = 2 + (i % 2) as usize;
                        let hw = if i % 3 == 0 { 6 } else { 4 };
                        let c = if i % 2 == 0 { 4 } else { 8 };
                        let mut cfg = NonLocalConfig::new(kind, c);
                        cfg.mask = mask;
                        cfg.subsample_spatial = sub;
                        let p = trained_params(&cfg, 500 + i)?;
                        let x = Tensor::<f64>::rand_uniform(
                            vec![t, hw, hw, c],
                            -1.0,
                            1.0,
                            &mut rng(600 + i),
                        );
                        let got = block_eval(&x, &p, &cfg)?;
                        let gamma: Vec<f64> = p.bn.gamma.data().to_vec();
                        let beta: Vec<f64> = p.bn.beta.data().to_vec();
                        let mean: Vec<f64> = p.bn.running_mean.data().to_vec();
                        let var: Vec<f64> = p.bn.running_var.data().to_vec();
                        let want = oracle::nonlocal_block_reference(
                            &x,
                            &p,
                            &cfg,
                            OracleBn::Eval {
                                gamma: &gamma,
                                beta: &beta,
                                mean: &mean,
                                var: &var,
                                eps: p.bn.eps,
                            },
                        );
                        worst = worst.max(got.max_abs_diff(&want));
                    }
                    Ok(worst)
                });
            }
        }
    }

    // literal Eq.6 (no batch norm) path against the oracle
    s.check("block/oracle/no_bn_path", 1e-8, || {
        let mut cfg = NonLocalConfig::new(PairwiseKind::DotProduct, 6);
        cfg.use_bn_on_wz = false;
        let mut p = trained_params(&cfg, 43)?;
        p.w_z = Tensor::randn(vec![cfg.bottleneck, 6], 0.5, &mut rng(44));
        let x = Tensor::<f64>::rand_uniform(vec![2, 4, 4, 6], -1.0, 1.0, &mut rng(45));
        let got = block_eval(&x, &p, &cfg)?;
        let want = oracle::nonlocal_block_reference(&x, &p, &cfg, OracleBn::Off);
        Ok(got.max_abs_diff(&want))
    });

    for kind in PairwiseKind::ALL {
        s.check(format!("block/identity_at_init/{}", kind.as_str()), 0.0, move || {
            let mut worst = 0.0f64;
            for use_bn in [true, false] {
                let mut cfg = NonLocalConfig::new(kind, 6);
                cfg.use_bn_on_wz = use_bn;
                let p = NonLocalParams::init("nl", &cfg, &mut rng(46))?;
                let x = Tensor::<f64>::rand_uniform(vec![2, 3, 3, 6], -1.0, 1.0, &mut rng(47));
                let z = block_eval(&x, &p, &cfg)?;
                let exact = z.data().iter().zip(x.data()).all(|(&a, &b)| a == b);
                if !exact {
                    worst = 1.0;
                }
            }
            Ok(worst)
        });
    }

    s.check("block/self_attention_equivalence", 1e-10, || {
        let cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 6);
        let p = trained_params(&cfg, 48)?;
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 3, 6], -1.0, 1.0, &mut rng(49));
        let n = 2 * 3 * 3;
        let mut tape = Tape::new();
        let xid = tape.leaf(x.reshaped(vec![1, 2, 3, 3, 6])?)?;
        let out = nonlocal_forward(&mut tape, xid, &p, &cfg)?;
        let got = tape.value(out.y).reshaped(vec![n, cfg.bottleneck])?;
        let want = oracle::self_attention_reference(
            &x.reshaped(vec![n, 6])?,
            p.w_theta.as_ref().expect("theta"),
            p.w_phi.as_ref().expect("phi"),
            &p.w_g,
        );
        Ok(got.max_abs_diff(&want))
    });

    s.check("block/gaussian_matches_identity_embedded", 0.0, || {
        let c = 4;
        let mut cfg_e = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, c);
        cfg_e.bottleneck = c;
        let mut p_e = trained_params(&cfg_e, 50)?;
        let mut eye = Tensor::zeros(vec![c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        p_e.w_theta = Some(eye.clone());
        p_e.w_phi = Some(eye);
        let mut cfg_g = cfg_e;
        cfg_g.kind = PairwiseKind::Gaussian;
        let mut p_g = p_e.clone();
        p_g.w_theta = None;
        p_g.w_phi = None;
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 3, c], -1.0, 1.0, &mut rng(51));
        let (a, b) = (block_eval(&x, &p_e, &cfg_e)?, block_eval(&x, &p_g, &cfg_g)?);
        Ok(if a.bit_eq(&b) { 0.0 } else { 1.0 })
    });

    s.check("block/concat_outer_sum_decomposition", 1e-12, || {
        let mut r = rng(52);
        let q = Tensor::<f64>::rand_uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let k = Tensor::<f64>::rand_uniform(vec![5, 3], -1.0, 1.0, &mut r);
        let wf = Tensor::<f64>::rand_uniform(vec![6], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (qi, ki, wi) = (tape.leaf(q.clone())?, tape.leaf(k.clone())?, tape.leaf(wf.clone())?);
        let aff = crate::pairwise::pairwise_scores(
            &mut tape,
            PairwiseKind::Concatenation,
            qi,
            ki,
            Some(wi),
        )?;
        Ok(tape
            .value(aff.values)
            .max_abs_diff(&oracle::concat_scores_literal(&q, &k, &wf)))
    });

    s.check("block/softmax_shift_invariance", 1e-10, || {
        let x = Tensor::<f64>::rand_uniform(vec![4, 6], -2.0, 2.0, &mut rng(53));
        let mut shifted = x.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += 3.7 * ((i / 6) as f64 + 1.0); // per-row constant
        }
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(x)?, tape.leaf(shifted)?);
        let (pa, pb) = (tape.softmax_rows(a, None)?, tape.softmax_rows(b, None)?);
        Ok(tape.value(pa).max_abs_diff(tape.value(pb)))
    });

    s.check("block/permutation_equivariance", 1e-12, || {
        let cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 4);
        let p = trained_params(&cfg, 54)?;
        let (t, h, w, c) = (2, 3, 3, 4);
        let n = t * h * w;
        let x = Tensor::<f64>::rand_uniform(vec![t, h, w, c], -1.0, 1.0, &mut rng(55));
        // a fixed position shuffle
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(56));
        let mut xp = Tensor::<f64>::zeros(vec![t, h, w, c]);
        for (dst, &src) in perm.iter().enumerate() {
            let (a, b) = (dst * c, src * c);
            let src_row = x.data()[b..b + c].to_vec();
            xp.data_mut()[a..a + c].copy_from_slice(&src_row);
        }
        let (z, zp) = (block_eval(&x, &p, &cfg)?, block_eval(&xp, &p, &cfg)?);
        let mut worst = 0.0f64;
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                worst = worst.max((zp.data()[dst * c + ch] - z.data()[src * c + ch]).abs());
            }
        }
        Ok(worst)
    });

    s.check("block/space_only_frame_isolation", 0.0, || {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 4);
        cfg.mask = MaskMode::SpaceOnly;
        let p = trained_params(&cfg, 57)?;
        let x1 = Tensor::<f64>::rand_uniform(vec![2, 3, 3, 4], -1.0, 1.0, &mut rng(58));
        let mut x2 = x1.clone();
        let frame = 3 * 3 * 4;
        let repl = Tensor::<f64>::rand_uniform(vec![frame], -1.0, 1.0, &mut rng(59));
        x2.data_mut()[frame..2 * frame].copy_from_slice(repl.data());
        let run = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.reshaped(vec![1, 2, 3, 3, 4])?)?;
            let out = nonlocal_forward(&mut tape, xid, &p, &cfg)?;
            Ok(tape.value(out.y).clone())
        };
        let (y1, y2) = (run(&x1)?, run(&x2)?);
        let fb = 3 * 3 * cfg.bottleneck;
        let exact = y1.data()[..fb]
            .iter()
            .zip(&y2.data()[..fb])
            .all(|(&a, &b)| a == b);
        Ok(if exact { 0.0 } else { 1.0 })
    });

    for kind in PairwiseKind::ALL {
        s.check(format!("block/constant_field/{}", kind.as_str()), 1e-12, move || {
            let cfg = NonLocalConfig::new(kind, 4);
            let p = trained_params(&cfg, 60)?;
            let cval = 0.6;
            let x = Tensor::<f64>::full(vec![2, 2, 2, 4], cval);
            let mut tape = Tape::new();
            let xid = tape.leaf(x.reshaped(vec![1, 2, 2, 2, 4])?)?;
            let out = nonlocal_forward(&mut tape, xid, &p, &cfg)?;
            let y = tape.value(out.y);
            let b = cfg.bottleneck;
            let first = y.data()[..b].to_vec();
            let mut worst = 0.0f64;
            for row in y.data().chunks(b) {
                for (a, f) in row.iter().zip(&first) {
                    worst = worst.max((a - f).abs());
                }
            }
            if kind.is_gaussian() {
                // convex rows over identical values: y = g(c)
                for (o, f) in first.iter().enumerate() {
                    let g: f64 = (0..4).map(|i| cval * p.w_g.data()[i * b + o]).sum();
                    worst = worst.max((f - g).abs());
                }
            }
            Ok(worst)
        });
    }

    // full-block gradient checks across every valid kind/mask/subsample cell
    for kind in PairwiseKind::ALL {
        for mask in ALL_MASKS {
            for sub in [1usize, 2] {
                if mask == MaskMode::TimeOnly && sub == 2 {
                    continue;
                }
                let name = format!(
                    "block/grad/{}/{}/sub{}",
                    kind.as_str(),
                    mask.as_str(),
                    sub
                );
                s.check(name, 1e-4, move || block_grad_check(kind, mask, sub));
            }
        }
    }

    VerifyReport {
        scope: "block",
        checks: s.checks,
    }
}

/// Finite-difference check over every parameter of a full block (train-mode
/// batch norm) plus the input.
fn block_grad_check(kind: PairwiseKind, mask: MaskMode, sub: usize) -> Result<f64> {
    let c = 4;
    let mut cfg = NonLocalConfig::new(kind, c);
    cfg.mask = mask;
    cfg.subsample_spatial = sub;
    let p = trained_params(&cfg, 70)?;
    let x = Tensor::<f64>::rand_uniform(vec![1, 2, 2, 2, c], -1.0, 1.0, &mut rng(71));

    let mut params: Vec<Tensor<f64>> = vec![p.w_g.clone()];
    let mut idx_theta = None;
    let mut idx_f = None;
    if let (Some(th), Some(ph)) = (&p.w_theta, &p.w_phi) {
        idx_theta = Some(params.len());
        params.push(th.clone());
        params.push(ph.clone());
    }
    if let Some(wf) = &p.w_f {
        idx_f = Some(params.len());
        params.push(wf.clone());
    }
    let idx_z = params.len();
    params.push(p.w_z.clone());
    let idx_gamma = params.len();
    params.push(p.bn.gamma.clone());
    params.push(p.bn.beta.clone());
    let idx_x = params.len();
    params.push(x);

    grad_check_multi(
        move |tape, ids| {
            let bound = BoundNonLocal {
                w_g: ids[0],
                w_theta: idx_theta.map(|i| ids[i]),
                w_phi: idx_theta.map(|i| ids[i + 1]),
                w_f: idx_f.map(|i| ids[i]),
                w_z: ids[idx_z],
            };
            let out = nonlocal_forward_bound(tape, ids[idx_x], &bound, &cfg)?;
            let n = 2 * 2 * 2;
            let yf = tape.reshape(out.y, vec![n, cfg.bottleneck])?;
            let wz = tape.matmul(yf, bound.w_z)?;
            let (bn, _, _) = tape.batch_norm_train(wz, ids[idx_gamma], ids[idx_gamma + 1], 1e-5)?;
            let grid = tape.reshape(bn, vec![1, 2, 2, 2, c])?;
            let z = tape.add(grid, ids[idx_x])?;
            tape.sum_all(z)
        },
        &params,
        1e-5,
    )
}

// ── backbone scope ──────────────────────────────────────────────────────

pub fn verify_backbone() -> VerifyReport {
    let mut s = Suite::new();

    s.check("backbone/table1_shape_trace", 0.0, || {
        let spec = NetworkSpec::full_scale(3, 400);
        let trace = spec.trace_shapes([32, 224, 224, 3])?;
        let want = [
            ("conv1", [16, 112, 112, 64]),
            ("pool1", [8, 56, 56, 64]),
            ("res2", [8, 56, 56, 256]),
            ("pool2", [4, 56, 56, 256]),
            ("res3", [4, 28, 28, 512]),
            ("res4", [4, 14, 14, 1024]),
            ("res5", [4, 7, 7, 2048]),
        ];
        for (name, dims) in want {
            let got = trace
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::config(format!("missing trace entry {name}")))?;
            if got.1 != dims {
                return Ok(1.0);
            }
        }
        Ok(0.0)
    });

    s.check("backbone/desk_params_within_1pct_of_cost_model", 0.01, || {
        let spec = NetworkSpec::desk(1, 2);
        let net = build_network::<f64>(&spec, 1.0, 1.0, 0)?;
        let model = count_network_cost(&net, [8, 32, 32, 1])?.total_params();
        let actual = net.num_trainable() as u64;
        Ok((model as f64 - actual as f64).abs() / actual as f64)
    });

    s.check("backbone/seeded_build_determinism", 0.0, || {
        let spec = NetworkSpec::desk(1, 2);
        let a = build_network::<f64>(&spec, 1.0, 1.0, 9)?;
        let b = build_network::<f64>(&spec, 1.0, 1.0, 9)?;
        let mut same = true;
        a.visit(&mut |name, t, _| {
            b.visit(&mut |n2, t2, _| {
                if n2 == name {
                    same &= t.bit_eq(t2);
                }
            });
        });
        Ok(if same { 0.0 } else { 1.0 })
    });

    s.check("backbone/identity_insertion_all_policies", 0.0, || {
        let spec = NetworkSpec::desk(1, 2);
        let base = build_network::<f64>(&spec, 1.0, 1.0, 9)?;
        let x = Tensor::rand_uniform(vec![1, 8, 32, 32, 1], -1.0, 1.0, &mut rng(80));
        let y0 = base.clone().forward_eval(&x)?;
        let i3d = inflate(&base, Inflation::I3d3x1x1)?;
        let y0_3d = i3d.clone().forward_eval(&x)?;
        for policy in [InsertPolicy::One, InsertPolicy::Five, InsertPolicy::Ten] {
            for (host, want) in [(&base, &y0), (&i3d, &y0_3d)] {
                let mut with_nl = insert_nonlocal(host, &policy, &NonLocalSettings::default(), 81)?;
                let y = with_nl.forward_eval(&x)?;
                if !y.data().iter().zip(want.data()).all(|(&a, &b)| a == b) {
                    return Ok(1.0);
                }
            }
        }
        Ok(0.0)
    });

    s.check("backbone/inflation_plane_sums_exact", 0.0, || {
        let spec = NetworkSpec::desk(1, 2);
        let base = build_network::<f64>(&spec, 1.0, 1.0, 10)?;
        for variant in [Inflation::I3d3x3x3, Inflation::I3d3x1x1] {
            let i3d = inflate(&base, variant)?;
            // conv1: planes must sum to the 2D stem
            if !planes_sum_to(&i3d.conv1.weight, &base.conv1.weight) {
                return Ok(1.0);
            }
            for (s3, s2) in i3d.stages.iter().zip(&base.stages) {
                for (a, b) in s3.items.iter().zip(&s2.items) {
                    if let (StageItem::Residual(ra), StageItem::Residual(rb)) = (a, b) {
                        let (wa, wb) = match variant {
                            Inflation::I3d3x3x3 => (&ra.conv2.weight, &rb.conv2.weight),
                            _ => (&ra.conv1.weight, &rb.conv1.weight),
                        };
                        if wa.dims()[0] > 1 && !planes_sum_to(wa, wb) {
                            return Ok(1.0);
                        }
                    }
                }
            }
        }
        Ok(0.0)
    });

    s.check("backbone/static_equivalence_replicate_pad", 1e-6, || {
        let mut spec = NetworkSpec::desk(1, 2);
        spec.time_pad = TimePad::Replicate;
        let base = build_network::<f64>(&spec, 1.0, 1.0, 11)?;
        let frame = Tensor::<f64>::rand_uniform(vec![1, 1, 32, 32, 1], -1.0, 1.0, &mut rng(82));
        let mut clip = Tensor::zeros(vec![1, 8, 32, 32, 1]);
        for t in 0..8 {
            let n = 32 * 32;
            clip.data_mut()[t * n..(t + 1) * n].copy_from_slice(frame.data());
        }
        let mut worst = 0.0f64;
        for variant in [Inflation::I3d3x3x3, Inflation::I3d3x1x1] {
            let mut i3d = inflate(&base, variant)?;
            let logits_3d = i3d.forward_eval(&clip)?;
            let logits_2d = base.clone().forward_eval(&frame)?;
            worst = worst.max(logits_3d.max_abs_diff(&logits_2d));
        }
        Ok(worst)
    });

    s.check("backbone/e2e_grad_check_micro", 1e-4, e2e_grad_check_micro);

    s.check("backbone/checkpoint_roundtrip", 0.0, || {
        let dir = std::env::temp_dir().join(format!("nlnet-verify-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("ck.nlnet");
        let spec = NetworkSpec::micro(1, 2);
        let net = build_network::<f64>(&spec, 1.0, 1.0, 12)?;
        let net = insert_nonlocal(&net, &InsertPolicy::One, &NonLocalSettings::default(), 13)?;
        save_network(&net, &path)?;
        let loaded = load_network::<f64>(&path)?;
        let x = Tensor::rand_uniform(vec![1, 2, 8, 8, 1], -1.0, 1.0, &mut rng(83));
        let (a, b) = (net.clone().forward_eval(&x)?, loaded.clone().forward_eval(&x)?);
        std::fs::remove_dir_all(&dir).ok();
        Ok(if a.bit_eq(&b) { 0.0 } else { 1.0 })
    });

    s.check("backbone/cost_subsample_exact_quarter", 0.0, || {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 64);
        let full = count_block_cost(&cfg, 4, 8, 8)?;
        cfg.subsample_spatial = 2;
        let sub = count_block_cost(&cfg, 4, 8, 8)?;
        let pick = |r: &crate::cost::CostReport, n: &str| {
            r.entries.iter().find(|e| e.name == n).map(|e| e.macs).unwrap_or(0)
        };
        let ok = pick(&full, "pairwise") == 4 * pick(&sub, "pairwise")
            && pick(&full, "aggregate") == 4 * pick(&sub, "aggregate");
        Ok(if ok { 0.0 } else { 1.0 })
    });

    s.check("backbone/cost_bottleneck_halving", 0.0, || {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 64);
        cfg.bottleneck = 64;
        let wide = count_block_cost(&cfg, 2, 4, 4)?;
        cfg.bottleneck = 32;
        let half = count_block_cost(&cfg, 2, 4, 4)?;
        let embed = |r: &crate::cost::CostReport| -> u64 {
            r.entries
                .iter()
                .filter(|e| matches!(e.name.as_str(), "w_g" | "w_theta" | "w_phi"))
                .map(|e| e.macs)
                .sum()
        };
        Ok(if embed(&wide) == 2 * embed(&half) { 0.0 } else { 1.0 })
    });

    s.check("backbone/cost_nl_cheaper_than_i3d", 0.0, || {
        let spec = NetworkSpec::desk(1, 2);
        let base = build_network::<f64>(&spec, 1.0, 1.0, 14)?;
        let input = [8usize, 32, 32, 1];
        let base_cost = count_network_cost(&base, input)?;
        let i3d = inflate(&base, Inflation::I3d3x3x3)?;
        let i3d_cost = count_network_cost(&i3d, input)?;
        let nl = insert_nonlocal(&base, &InsertPolicy::Five, &NonLocalSettings::default(), 15)?;
        let nl_cost = count_network_cost(&nl, input)?;
        let (p_nl, f_nl) = nl_cost.ratios_vs(&base_cost);
        let (_, f_i3d) = i3d_cost.ratios_vs(&base_cost);
        let ok = f_nl < f_i3d && p_nl > 1.0 && p_nl < 1.5;
        Ok(if ok { 0.0 } else { 1.0 })
    });

    s.check("backbone/cost_self_ratio_unity", 0.0, || {
        let spec = NetworkSpec::desk(1, 2);
        let net = build_network::<f64>(&spec, 1.0, 1.0, 16)?;
        let r = count_network_cost(&net, [8, 32, 32, 1])?;
        let (p, f) = r.ratios_vs(&r);
        Ok(if p == 1.0 && f == 1.0 { 0.0 } else { 1.0 })
    });

    VerifyReport {
        scope: "backbone",
        checks: s.checks,
    }
}

fn planes_sum_to(inflated: &Tensor<f64>, source: &Tensor<f64>) -> bool {
    let t = inflated.dims()[0];
    let plane = source.numel();
    for i in 0..plane {
        let mut sum = 0.0f64;
        for p in 0..t {
            sum += inflated.data()[p * plane + i];
        }
        if sum.to_bits() != source.data()[i].to_bits() {
            return false;
        }
    }
    true
}

/// Exhaustive central-difference check of the production forward/backward
/// path on a sub-5k-parameter network with one non-local block.
fn e2e_grad_check_micro() -> Result<f64> {
    let spec = NetworkSpec::micro(1, 2);
    let net = build_network::<f64>(&spec, 1.0, 1.0, 17)?;
    let net = insert_nonlocal(&net, &InsertPolicy::One, &NonLocalSettings::default(), 18)?;
    let x = Tensor::<f64>::rand_uniform(vec![2, 2, 8, 8, 1], -1.0, 1.0, &mut rng(84));
    let labels = [0usize, 1];

    let loss_of = |net: &crate::backbone::Network<f64>| -> Result<f64> {
        let mut net = net.clone();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx {
            mode: RunMode::Train {
                dropout: 0.0,
                bn_frozen: false,
            },
            rng: None,
            binds: Vec::new(),
            captures: Vec::new(),
        };
        let xid = tape.leaf(x.clone())?;
        let logits = net.forward(&mut tape, &mut ctx, xid)?;
        let l = tape.cross_entropy(logits, &labels)?;
        Ok(tape.value(l).data()[0])
    };

    // analytic gradients through the production path
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    {
        let mut net = net.clone();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx {
            mode: RunMode::Train {
                dropout: 0.0,
                bn_frozen: false,
            },
            rng: None,
            binds: Vec::new(),
            captures: Vec::new(),
        };
        let xid = tape.leaf(x.clone())?;
        let logits = net.forward(&mut tape, &mut ctx, xid)?;
        let l = tape.cross_entropy(logits, &labels)?;
        tape.backward(l)?;
        for (name, id) in &ctx.binds {
            let g = tape
                .grad(*id)
                .ok_or_else(|| Error::Numeric(format!("no grad for {name}")))?;
            analytic.push((name.clone(), g.to_vec()));
        }
    }

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for ei in 0..grad.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut pert = net.clone();
                let mut done = false;
                pert.visit_mut(&mut |n, t, kind| {
                    if kind == ParamKind::Trainable && n == name && !done {
                        t.data_mut()[ei] += delta;
                        done = true;
                    }
                });
                if !done {
                    return Err(Error::Numeric(format!("parameter {name} not found")));
                }
                loss_of(&pert)
            };
            let central = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = grad[ei];
            let denom = 1.0f64.max(a.abs()).max(central.abs());
            worst = worst.max((a - central).abs() / denom);
        }
    }
    Ok(worst)
}

/// Run the requested scopes.
pub fn verify_scope(scope: &str, opts: &VerifyOptions) -> Result<Vec<VerifyReport>> {
    match scope {
        "ops" => Ok(vec![verify_ops(opts)]),
        "block" => Ok(vec![verify_block()]),
        "backbone" => Ok(vec![verify_backbone()]),
        "all" => Ok(vec![verify_ops(opts), verify_block(), verify_backbone()]),
        other => Err(Error::config(format!(
            "unknown verify scope '{other}' (want ops|block|backbone|all)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_is_green() {
        let report = verify_ops(&VerifyOptions::default());
        assert!(report.passed(), "\n{}", report.render());
    }

    #[test]
    fn fault_injection_is_caught_and_named() {
        let report = verify_ops(&VerifyOptions {
            softmax_grad_fault: Some(1e-3),
        });
        assert!(!report.passed());
        let failing: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        assert!(
            failing.iter().all(|n| n.contains("softmax")),
            "only softmax checks should fail, got {failing:?}"
        );
        assert!(!failing.is_empty());
    }

    #[test]
    fn block_suite_is_green() {
        let report = verify_block();
        assert!(report.passed(), "\n{}", report.render());
    }

    #[test]
    fn backbone_suite_is_green() {
        let report = verify_backbone();
        assert!(report.passed(), "\n{}", report.render());
    }

    #[test]
    fn unknown_scope_is_config_error() {
        assert!(verify_scope("bogus", &VerifyOptions::default()).is_err());
    }
}
