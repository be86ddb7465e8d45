//! Independent reference implementations used to check the tape kernels and
//! the non-local block.
//!
//! Everything here is written as literal per-element loops over the defining
//! formulas and deliberately shares no code with the production kernels in
//! [`crate::tape`] or [`crate::nonlocal`]. Reductions run in f64 regardless
//! of the tensor scalar type.

use crate::nonlocal::{NonLocalConfig, NonLocalParams};
use crate::pairwise::PairwiseKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Triple nested loop matrix product.
pub fn naive_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    assert_eq!(k, b.dims()[0]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for p in 0..k {
                s += a.data()[i * k + p].to_f64_lossy() * b.data()[p * n + j].to_f64_lossy();
            }
            out[i * n + j] = T::lit(s);
        }
    }
    Tensor::from_vec(vec![m, n], out).expect("oracle shape")
}

/// Direct exp / sum-of-exp softmax per row, computed in f64. Only valid at
/// small score magnitudes; that restriction is the point of the stabilized
/// implementation it checks.
pub fn naive_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.dims()[0], x.dims()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let mut sum = 0.0f64;
        for j in 0..c {
            sum += x.data()[i * c + j].to_f64_lossy().exp();
        }
        for j in 0..c {
            out[i * c + j] = T::lit(x.data()[i * c + j].to_f64_lossy().exp() / sum);
        }
    }
    Tensor::from_vec(vec![r, c], out).expect("oracle shape")
}

/// Per-frame 2D convolution of x[B,T,H,W,Ci] with a 1xKhxKw kernel, zero
/// spatial padding semantics.
pub fn naive_conv_per_frame_2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Tensor<T> {
    let d = x.dims();
    let (b, t, h, wi, ci) = (d[0], d[1], d[2], d[3], d[4]);
    let wd = w.dims();
    assert_eq!(wd[0], 1, "per-frame oracle wants a 1xKhxKw kernel");
    let (kh, kw, co) = (wd[1], wd[2], wd[4]);
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (wi + 2 * pad[1] - kw) / stride[1] + 1;
    let mut out = vec![T::zero(); b * t * oh * ow * co];
    for bb in 0..b {
        for tt in 0..t {
            for y in 0..oh {
                for xx in 0..ow {
                    for oc in 0..co {
                        let mut s = 0.0f64;
                        for dy in 0..kh {
                            let ih = (y * stride[0] + dy) as isize - pad[0] as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let iw = (xx * stride[1] + dx) as isize - pad[1] as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                for ic in 0..ci {
                                    let xi = ((((bb * t + tt) * h + ih as usize) * wi)
                                        + iw as usize)
                                        * ci
                                        + ic;
                                    let wi2 = (((dy * kw + dx) * ci) + ic) * co + oc;
                                    s += x.data()[xi].to_f64_lossy() * w.data()[wi2].to_f64_lossy();
                                }
                            }
                        }
                        let oi = ((((bb * t + tt) * oh + y) * ow) + xx) * co + oc;
                        out[oi] = T::lit(s);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, t, oh, ow, co], out).expect("oracle shape")
}

/// Nested-loop max pool with ignore-out-of-range padding semantics.
pub fn naive_max_pool3d<T: Scalar>(
    x: &Tensor<T>,
    window: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<T> {
    let d = x.dims();
    let (b, t, h, w, c) = (d[0], d[1], d[2], d[3], d[4]);
    let od = [
        (t + 2 * pad[0] - window[0]) / stride[0] + 1,
        (h + 2 * pad[1] - window[1]) / stride[1] + 1,
        (w + 2 * pad[2] - window[2]) / stride[2] + 1,
    ];
    let mut out = vec![T::zero(); b * od[0] * od[1] * od[2] * c];
    for bb in 0..b {
        for ot in 0..od[0] {
            for oh in 0..od[1] {
                for ow in 0..od[2] {
                    for ch in 0..c {
                        let mut best: Option<T> = None;
                        for kt in 0..window[0] {
                            let it = (ot * stride[0] + kt) as isize - pad[0] as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for kh in 0..window[1] {
                                let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..window[2] {
                                    let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let v = x.data()[((((bb * t + it as usize) * h + ih as usize)
                                        * w)
                                        + iw as usize)
                                        * c
                                        + ch];
                                    best = Some(match best {
                                        None => v,
                                        Some(m) if v > m => v,
                                        Some(m) => m,
                                    });
                                }
                            }
                        }
                        let oi = ((((bb * od[0] + ot) * od[1] + oh) * od[2]) + ow) * c + ch;
                        out[oi] = best.expect("nonempty window");
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, od[0], od[1], od[2], c], out).expect("oracle shape")
}

/// The literal concatenation pairwise function: for each pair (i, j) build
/// [q_i, k_j], dot it with w_f, apply ReLU.
pub fn concat_scores_literal<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, w_f: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (q.dims()[0], q.dims()[1]);
    let m = k.dims()[0];
    assert_eq!(k.dims()[1], d);
    assert_eq!(w_f.numel(), 2 * d);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            let mut cat = Vec::with_capacity(2 * d);
            cat.extend_from_slice(&q.data()[i * d..(i + 1) * d]);
            cat.extend_from_slice(&k.data()[j * d..(j + 1) * d]);
            let mut s = 0.0f64;
            for (a, b) in cat.iter().zip(w_f.data()) {
                s += a.to_f64_lossy() * b.to_f64_lossy();
            }
            out[i * m + j] = T::lit(s.max(0.0));
        }
    }
    Tensor::from_vec(vec![n, m], out).expect("oracle shape")
}

/// softmax(Q K^T) V with Q = x W_theta, K = x W_phi, V = x W_g, all computed
/// by plain loops. This is the self-attention form the embedded Gaussian
/// block must reproduce.
pub fn self_attention_reference<T: Scalar>(
    x: &Tensor<T>,
    w_theta: &Tensor<T>,
    w_phi: &Tensor<T>,
    w_g: &Tensor<T>,
) -> Tensor<T> {
    let q = naive_matmul(x, w_theta);
    let k = naive_matmul(x, w_phi);
    let v = naive_matmul(x, w_g);
    let (n, d) = (q.dims()[0], q.dims()[1]);
    let mut scores = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0f64;
            for p in 0..d {
                s += q.data()[i * d + p].to_f64_lossy() * k.data()[j * d + p].to_f64_lossy();
            }
            scores[i * n + j] = T::lit(s);
        }
    }
    let probs = stable_softmax_rows_f64(&scores, n, n);
    let dv = v.dims()[1];
    let mut out = vec![T::zero(); n * dv];
    for i in 0..n {
        for c in 0..dv {
            let mut s = 0.0f64;
            for j in 0..n {
                s += probs[i * n + j] * v.data()[j * dv + c].to_f64_lossy();
            }
            out[i * dv + c] = T::lit(s);
        }
    }
    Tensor::from_vec(vec![n, dv], out).expect("oracle shape")
}

fn stable_softmax_rows_f64<T: Scalar>(scores: &[T], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; r * c];
    for i in 0..r {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..c {
            mx = mx.max(scores[i * c + j].to_f64_lossy());
        }
        let mut sum = 0.0;
        for j in 0..c {
            let e = (scores[i * c + j].to_f64_lossy() - mx).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    out
}

/// Mode for the block oracle's batch norm stage.
pub enum OracleBn<'a> {
    /// No batch norm: z_i = W_z y_i + x_i literally.
    Off,
    /// Affine with fixed statistics (evaluation-mode batch norm).
    Eval {
        gamma: &'a [f64],
        beta: &'a [f64],
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-position loop implementation of the non-local operation and block for
/// a single clip x[T,H,W,C]. Every stage — embeddings, key/value pooling,
/// pairwise scores, normalization, aggregation, the output projection, batch
/// norm, and the residual — is computed by scalar loops over the defining
/// formulas.
pub fn nonlocal_block_reference<T: Scalar>(
    x: &Tensor<T>,
    params: &NonLocalParams<T>,
    cfg: &NonLocalConfig,
    bn: OracleBn<'_>,
) -> Tensor<T> {
    let d = x.dims();
    let (t, h, w, c) = (d[0], d[1], d[2], d[3]);
    let n = t * h * w;
    let s = cfg.subsample_spatial;
    let (hk, wk) = (h / s, w / s);
    let m = t * hk * wk;
    let b = cfg.bottleneck;

    let xs: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let row = |p: usize| -> &[f64] { &xs[p * c..(p + 1) * c] };

    let apply = |wm: &Tensor<T>, v: &[f64]| -> Vec<f64> {
        let (ci, co) = (wm.dims()[0], wm.dims()[1]);
        let mut out = vec![0.0f64; co];
        for o in 0..co {
            let mut acc = 0.0;
            for i in 0..ci {
                acc += v[i] * wm.data()[i * co + o].to_f64_lossy();
            }
            out[o] = acc;
        }
        out
    };

    // per-position embeddings over the full grid
    let g_full: Vec<Vec<f64>> = (0..n).map(|p| apply(&params.w_g, row(p))).collect();
    let q_full: Vec<Vec<f64>> = match (&cfg.kind, &params.w_theta) {
        (PairwiseKind::Gaussian, _) => (0..n).map(|p| row(p).to_vec()).collect(),
        (_, Some(wt)) => (0..n).map(|p| apply(wt, row(p))).collect(),
        _ => panic!("missing w_theta"),
    };
    let k_full: Vec<Vec<f64>> = match (&cfg.kind, &params.w_phi) {
        (PairwiseKind::Gaussian, _) => (0..n).map(|p| row(p).to_vec()).collect(),
        (_, Some(wp)) => (0..n).map(|p| apply(wp, row(p))).collect(),
        _ => panic!("missing w_phi"),
    };

    // spatial max pool of keys and values, channel by channel
    let pool = |full: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let dk = full[0].len();
        let mut out = vec![vec![0.0f64; dk]; m];
        for tt in 0..t {
            for ph in 0..hk {
                for pw in 0..wk {
                    let dst = (tt * hk + ph) * wk + pw;
                    for ch in 0..dk {
                        let mut best = f64::NEG_INFINITY;
                        for dh in 0..s {
                            for dw in 0..s {
                                let src = (tt * h + ph * s + dh) * w + pw * s + dw;
                                best = best.max(full[src][ch]);
                            }
                        }
                        out[dst][ch] = best;
                    }
                }
            }
        }
        out
    };
    let (keys, values) = if s > 1 {
        (pool(&k_full), pool(&g_full))
    } else {
        (k_full, g_full)
    };

    let query_pos = |p: usize| -> (usize, usize, usize) {
        (p / (h * w), (p / w) % h, p % w)
    };
    let key_pos = |p: usize| -> (usize, usize, usize) {
        (p / (hk * wk), (p / wk) % hk, p % wk)
    };
    let allowed = |i: usize, j: usize| -> bool {
        let (ti, hi, wi) = query_pos(i);
        let (tj, hj, wj) = key_pos(j);
        match cfg.mask {
            crate::mask::MaskMode::Spacetime => true,
            crate::mask::MaskMode::SpaceOnly => ti == tj,
            crate::mask::MaskMode::TimeOnly => (hi, wi) == (hj, wj),
        }
    };

    // y_i = (1 / C(x)) * sum_j f(x_i, x_j) g(x_j), restricted to allowed j
    let mut y = vec![vec![0.0f64; b]; n];
    for i in 0..n {
        let f_of = |j: usize| -> f64 {
            let mut dot = 0.0;
            for p in 0..q_full[i].len() {
                dot += q_full[i][p] * keys[j][p];
            }
            match cfg.kind {
                PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => dot.exp(),
                PairwiseKind::DotProduct => dot,
                PairwiseKind::Concatenation => {
                    let wf = params.w_f.as_ref().expect("w_f");
                    let d2 = q_full[i].len();
                    let mut acc = 0.0;
                    for p in 0..d2 {
                        acc += wf.data()[p].to_f64_lossy() * q_full[i][p];
                    }
                    for p in 0..d2 {
                        acc += wf.data()[d2 + p].to_f64_lossy() * keys[j][p];
                    }
                    acc.max(0.0)
                }
            }
        };
        let norm: f64 = match cfg.kind {
            PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => {
                (0..m).filter(|&j| allowed(i, j)).map(f_of).sum()
            }
            PairwiseKind::DotProduct | PairwiseKind::Concatenation => {
                (0..m).filter(|&j| allowed(i, j)).count() as f64
            }
        };
        for j in 0..m {
            if !allowed(i, j) {
                continue;
            }
            let fij = f_of(j) / norm;
            for ch in 0..b {
                y[i][ch] += fij * values[j][ch];
            }
        }
    }

    // z_i = BN(W_z y_i) + x_i
    let mut z = vec![T::zero(); n * c];
    for i in 0..n {
        let wz_out = apply(&params.w_z, &y[i]);
        for ch in 0..c {
            let v = match &bn {
                OracleBn::Off => wz_out[ch],
                OracleBn::Eval {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => gamma[ch] * (wz_out[ch] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch],
            };
            z[i * c + ch] = T::lit(v + xs[i * c + ch]);
        }
    }
    Tensor::from_vec(vec![t, h, w, c], z).expect("oracle shape")
}

/// The normalized affinity row for one query position, computed by the same
/// literal loops as [`nonlocal_block_reference`]. Used to check attention
/// extraction.
pub fn affinity_row_reference<T: Scalar>(
    x: &Tensor<T>,
    params: &NonLocalParams<T>,
    cfg: &NonLocalConfig,
    query: usize,
) -> Vec<f64> {
    let d = x.dims();
    let (t, h, w, _c) = (d[0], d[1], d[2], d[3]);
    let full = nonlocal_affinity_reference(x, params, cfg);
    let s = cfg.subsample_spatial;
    let m = t * (h / s) * (w / s);
    full[query * m..(query + 1) * m].to_vec()
}

/// Full normalized affinity matrix by literal loops.
pub fn nonlocal_affinity_reference<T: Scalar>(
    x: &Tensor<T>,
    params: &NonLocalParams<T>,
    cfg: &NonLocalConfig,
) -> Vec<f64> {
    let d = x.dims();
    let (t, h, w, c) = (d[0], d[1], d[2], d[3]);
    let n = t * h * w;
    let s = cfg.subsample_spatial;
    let (hk, wk) = (h / s, w / s);
    let m = t * hk * wk;

    let xs: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let row = |p: usize| -> &[f64] { &xs[p * c..(p + 1) * c] };
    let apply = |wm: &Tensor<T>, v: &[f64]| -> Vec<f64> {
        let (ci, co) = (wm.dims()[0], wm.dims()[1]);
        (0..co)
            .map(|o| (0..ci).map(|i| v[i] * wm.data()[i * co + o].to_f64_lossy()).sum())
            .collect()
    };
    let q_full: Vec<Vec<f64>> = match (&cfg.kind, &params.w_theta) {
        (PairwiseKind::Gaussian, _) => (0..n).map(|p| row(p).to_vec()).collect(),
        (_, Some(wt)) => (0..n).map(|p| apply(wt, row(p))).collect(),
        _ => panic!("missing w_theta"),
    };
    let k_full: Vec<Vec<f64>> = match (&cfg.kind, &params.w_phi) {
        (PairwiseKind::Gaussian, _) => (0..n).map(|p| row(p).to_vec()).collect(),
        (_, Some(wp)) => (0..n).map(|p| apply(wp, row(p))).collect(),
        _ => panic!("missing w_phi"),
    };
    let keys: Vec<Vec<f64>> = if s > 1 {
        let dk = k_full[0].len();
        let mut out = vec![vec![0.0f64; dk]; m];
        for tt in 0..t {
            for ph in 0..hk {
                for pw in 0..wk {
                    let dst = (tt * hk + ph) * wk + pw;
                    for ch in 0..dk {
                        let mut best = f64::NEG_INFINITY;
                        for dh in 0..s {
                            for dw in 0..s {
                                best = best.max(k_full[(tt * h + ph * s + dh) * w + pw * s + dw][ch]);
                            }
                        }
                        out[dst][ch] = best;
                    }
                }
            }
        }
        out
    } else {
        k_full
    };

    let allowed = |i: usize, j: usize| -> bool {
        let (ti, hi, wi) = (i / (h * w), (i / w) % h, i % w);
        let (tj, hj, wj) = (j / (hk * wk), (j / wk) % hk, j % wk);
        match cfg.mask {
            crate::mask::MaskMode::Spacetime => true,
            crate::mask::MaskMode::SpaceOnly => ti == tj,
            crate::mask::MaskMode::TimeOnly => (hi, wi) == (hj, wj),
        }
    };

    let mut out = vec![0.0f64; n * m];
    for i in 0..n {
        let score = |j: usize| -> f64 {
            let mut dot = 0.0;
            for p in 0..q_full[i].len() {
                dot += q_full[i][p] * keys[j][p];
            }
            match cfg.kind {
                PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => dot,
                PairwiseKind::DotProduct => dot,
                PairwiseKind::Concatenation => {
                    let wf = params.w_f.as_ref().expect("w_f");
                    let d2 = q_full[i].len();
                    let mut acc = 0.0;
                    for p in 0..d2 {
                        acc += wf.data()[p].to_f64_lossy() * q_full[i][p];
                    }
                    for p in 0..d2 {
                        acc += wf.data()[d2 + p].to_f64_lossy() * keys[j][p];
                    }
                    acc.max(0.0)
                }
            }
        };
        match cfg.kind {
            PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => {
                let mut denom = 0.0;
                for j in 0..m {
                    if allowed(i, j) {
                        denom += score(j).exp();
                    }
                }
                for j in 0..m {
                    if allowed(i, j) {
                        out[i * m + j] = score(j).exp() / denom;
                    }
                }
            }
            PairwiseKind::DotProduct | PairwiseKind::Concatenation => {
                let count = (0..m).filter(|&j| allowed(i, j)).count() as f64;
                for j in 0..m {
                    if allowed(i, j) {
                        out[i * m + j] = score(j) / count;
                    }
                }
            }
        }
    }
    out
}
