//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append records in topological order during the forward pass;
//! [`Tape::backward`] replays them in reverse, visiting each record exactly
//! once and accumulating vector-Jacobian products into per-node gradient
//! buffers. Every operation checks its output for NaN/Inf; a non-finite
//! value is an error, not a tensor state.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Temporal padding behavior of 3D convolutions. Spatial padding is always
/// zero-padding; `Replicate` clamps the time index to the clip range so that
/// a static clip convolves exactly like a single frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimePad {
    Zero,
    Replicate,
}

/// Geometry of a 3D convolution, axes ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub time_pad: TimePad,
}

/// Geometry of a 3D max pool, axes ordered (t, h, w). Out-of-range taps are
/// ignored rather than padded with a value, so padding can never win the max.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

type Mask = Arc<Vec<bool>>;

enum Op<T: Scalar> {
    Leaf,
    /// c = a[MxK] . b[KxN]
    Matmul { a: TensorId, b: TensorId },
    /// c = a[MxK] . b[NxK]^T
    MatmulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    MulElem { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Relu { x: TensorId },
    /// Row softmax; masked-out entries are excluded from the reduction and
    /// fixed at exactly zero in the output.
    SoftmaxRows { x: TensorId, mask: Option<Mask> },
    /// Zero masked entries, divide the rest by the per-row kept count.
    DivRowCount { x: TensorId, mask: Option<Mask>, counts: Vec<T> },
    /// out[i, j] = u[i] + v[j]
    OuterAdd { u: TensorId, v: TensorId },
    Conv3d { x: TensorId, w: TensorId, spec: ConvSpec },
    MaxPool3d { x: TensorId, argmax: Vec<usize> },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout { x: TensorId, keep: Vec<bool>, scale: T },
    GlobalAvgPool { x: TensorId },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape { x: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    NarrowRows { x: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    SumAll { x: TensorId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Wengert tape. Confined to one thread of execution; independent tapes may
/// run on independent threads.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// Test fixture: when set, the softmax backward pass is perturbed by this
    /// constant so verification suites can prove they catch a broken
    /// gradient. Never set outside tests and fault-injection checks.
    pub softmax_grad_fault: Option<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            softmax_grad_fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<TensorId> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<TensorId> {
        self.push("leaf", value, Op::Leaf)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_string(),
                rhs: self.value(b).shape().to_string(),
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let c = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(vec![m, n], c)?;
        self.push("matmul", out, Op::Matmul { a, b })
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_string(),
                rhs: self.value(b).shape().to_string(),
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[0]);
        let c = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(vec![m, n], c)?;
        self.push("matmul_nt", out, Op::MatmulNT { a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_string(),
                rhs: self.value(b).shape().to_string(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().clone(), data)?;
        self.push("add", out, Op::Add { a, b })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                lhs: self.value(a).shape().to_string(),
                rhs: self.value(b).shape().to_string(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().clone(), data)?;
        self.push("mul_elem", out, Op::MulElem { a, b })
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        let bd = self.value(bias).dims().to_vec();
        let c = *xd.last().expect("nonempty dims");
        if bd.len() != 1 || bd[0] != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_string(),
                rhs: self.value(bias).shape().to_string(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let out = Tensor::new(self.value(x).shape().clone(), data)?;
        self.push("add_bias", out, Op::AddBias { x, bias })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(self.value(x).shape().clone(), data)?;
        self.push("relu", out, Op::Relu { x })
    }

    /// Numerically stable row softmax with per-row max subtraction. When a
    /// mask is given, masked entries are excluded from the reduction and set
    /// to exactly zero; each row must keep at least one entry.
    pub fn softmax_rows(&mut self, x: TensorId, mask: Option<Mask>) -> Result<TensorId> {
        let dims = self.value(x).dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("want 2-D input, got {}", self.value(x).shape())));
        }
        let (r, c) = (dims[0], dims[1]);
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", "mask length mismatch"));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    any = true;
                    if v > mx {
                        mx = v;
                    }
                }
            }
            if !any {
                return Err(Error::Numeric(format!("softmax_rows: row {i} fully masked")));
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if keep(j) {
                    out[i * c + j] = out[i * c + j] / sum;
                }
            }
        }
        let out = Tensor::from_vec(vec![r, c], out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows { x, mask })
    }

    /// 1/M normalization: zero masked entries and divide kept ones by the
    /// per-row kept count (the count is M when no mask is given).
    pub fn div_row_count(&mut self, x: TensorId, mask: Option<Mask>) -> Result<TensorId> {
        let dims = self.value(x).dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::shape("div_row_count", format!("want 2-D input, got {}", self.value(x).shape())));
        }
        let (r, c) = (dims[0], dims[1]);
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::shape("div_row_count", "mask length mismatch"));
            }
        }
        let mut counts = Vec::with_capacity(r);
        for i in 0..r {
            let n = match &mask {
                None => c,
                Some(m) => (0..c).filter(|&j| m[i * c + j]).count(),
            };
            if n == 0 {
                return Err(Error::Numeric(format!("div_row_count: row {i} fully masked")));
            }
            counts.push(T::lit(n as f64));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                if mask.as_ref().map_or(true, |m| m[i * c + j]) {
                    out[i * c + j] = xs[i * c + j] / counts[i];
                }
            }
        }
        let out = Tensor::from_vec(vec![r, c], out)?;
        self.push("div_row_count", out, Op::DivRowCount { x, mask, counts })
    }

    pub fn outer_add(&mut self, u: TensorId, v: TensorId) -> Result<TensorId> {
        let (ud, vd) = (self.value(u).dims().to_vec(), self.value(v).dims().to_vec());
        if ud.len() != 1 || vd.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer_add",
                lhs: self.value(u).shape().to_string(),
                rhs: self.value(v).shape().to_string(),
            });
        }
        let (n, m) = (ud[0], vd[0]);
        let (us, vs) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(us[i] + vs[j]);
            }
        }
        let out = Tensor::from_vec(vec![n, m], out)?;
        self.push("outer_add", out, Op::OuterAdd { u, v })
    }

    /// Cross-correlation of x[B,T,H,W,Cin] with w[kt,kh,kw,Cin,Cout].
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        if xd.len() != 5 || wd.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: self.value(x).shape().to_string(),
                rhs: self.value(w).shape().to_string(),
            });
        }
        if wd[3] != xd[4] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: self.value(x).shape().to_string(),
                rhs: self.value(w).shape().to_string(),
            });
        }
        let out_dims = conv_out_dims(&xd, &wd, &spec)?;
        let data = conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &xd,
            &wd,
            &out_dims,
            &spec,
        );
        let out = Tensor::from_vec(out_dims, data)?;
        self.push("conv3d", out, Op::Conv3d { x, w, spec })
    }

    /// Max over (t, h, w) windows per channel; ties broken by the first
    /// input index in scan order.
    pub fn max_pool3d(&mut self, x: TensorId, geom: PoolGeom) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 5 {
            return Err(Error::shape("max_pool3d", format!("want 5-D input, got {}", self.value(x).shape())));
        }
        let (b, dims_in, c) = (xd[0], [xd[1], xd[2], xd[3]], xd[4]);
        let mut dims_out = [0usize; 3];
        for ax in 0..3 {
            let (l, k, s, p) = (dims_in[ax], geom.window[ax], geom.stride[ax], geom.pad[ax]);
            if k == 0 || s == 0 {
                return Err(Error::shape("max_pool3d", "window and stride must be >= 1"));
            }
            if p >= k {
                return Err(Error::shape("max_pool3d", format!("pad {p} must be smaller than window {k}")));
            }
            if k > l + 2 * p {
                return Err(Error::shape(
                    "max_pool3d",
                    format!("window {k} exceeds padded extent {} on axis {ax}", l + 2 * p),
                ));
            }
            dims_out[ax] = (l + 2 * p - k) / s + 1;
        }
        let xs = self.value(x).data();
        let numel_out = b * dims_out[0] * dims_out[1] * dims_out[2] * c;
        let mut out = vec![T::zero(); numel_out];
        let mut argmax = vec![0usize; numel_out];
        let (ti, hi, wi) = (dims_in[0], dims_in[1], dims_in[2]);
        let mut oi = 0;
        for bb in 0..b {
            for ot in 0..dims_out[0] {
                for oh in 0..dims_out[1] {
                    for ow in 0..dims_out[2] {
                        let base_out = oi;
                        // scan each channel's window; first max wins ties
                        for ch in 0..c {
                            let mut best: Option<(T, usize)> = None;
                            for kt in 0..geom.window[0] {
                                let it = (ot * geom.stride[0] + kt) as isize - geom.pad[0] as isize;
                                if it < 0 || it >= ti as isize {
                                    continue;
                                }
                                for kh in 0..geom.window[1] {
                                    let ih = (oh * geom.stride[1] + kh) as isize - geom.pad[1] as isize;
                                    if ih < 0 || ih >= hi as isize {
                                        continue;
                                    }
                                    for kw in 0..geom.window[2] {
                                        let iw = (ow * geom.stride[2] + kw) as isize - geom.pad[2] as isize;
                                        if iw < 0 || iw >= wi as isize {
                                            continue;
                                        }
                                        let idx = ((((bb * ti + it as usize) * hi + ih as usize) * wi)
                                            + iw as usize)
                                            * c
                                            + ch;
                                        let v = xs[idx];
                                        match best {
                                            None => best = Some((v, idx)),
                                            Some((bv, _)) if v > bv => best = Some((v, idx)),
                                            _ => {}
                                        }
                                    }
                                }
                            }
                            let (v, idx) = best.ok_or_else(|| {
                                Error::Numeric("max_pool3d: empty window".into())
                            })?;
                            out[base_out + ch] = v;
                            argmax[base_out + ch] = idx;
                        }
                        oi += c;
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b, dims_out[0], dims_out[1], dims_out[2], c], out)?;
        self.push("max_pool3d", out, Op::MaxPool3d { x, argmax })
    }

    /// Batch statistics normalization over all leading dims, channels last.
    /// Returns the output plus the batch mean/variance so the caller can fold
    /// them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<T>, Vec<T>)> {
        let (c, s) = self.bn_check(x, gamma, beta)?;
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        for i in 0..s {
            for ch in 0..c {
                mean[ch] += xs[i * c + ch];
            }
        }
        let inv_s = T::one() / T::lit(s as f64);
        for m in mean.iter_mut() {
            *m = *m * inv_s;
        }
        let mut var = vec![T::zero(); c];
        for i in 0..s {
            for ch in 0..c {
                let d = xs[i * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_s;
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..s {
            for ch in 0..c {
                out[i * c + ch] = g[ch] * (xs[i * c + ch] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let out = Tensor::new(self.value(x).shape().clone(), out)?;
        let id = self.push(
            "batch_norm_train",
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        )?;
        Ok((id, mean, var))
    }

    /// Normalization with fixed (running) statistics; gradients still flow to
    /// x, gamma, and beta.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<TensorId> {
        let (c, s) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_eval", "running stats length mismatch"));
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        let xs = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..s {
            for ch in 0..c {
                out[i * c + ch] = g[ch] * (xs[i * c + ch] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let out = Tensor::new(self.value(x).shape().clone(), out)?;
        self.push(
            "batch_norm_eval",
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    fn bn_check(&self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<(usize, usize)> {
        let xd = self.value(x).dims();
        if xd.len() < 2 {
            return Err(Error::shape("batch_norm", "want at least 2-D input, channels last"));
        }
        let c = *xd.last().expect("nonempty");
        let s = self.value(x).numel() / c;
        for p in [gamma, beta] {
            let pd = self.value(p).dims();
            if pd.len() != 1 || pd[0] != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: self.value(x).shape().to_string(),
                    rhs: self.value(p).shape().to_string(),
                });
            }
        }
        Ok((c, s))
    }

    /// Inverted dropout: kept activations are scaled by 1/(1-rate) at train
    /// time so evaluation is the identity.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_p = 1.0 - rate;
        let scale = T::lit(1.0 / keep_p);
        let keep: Vec<bool> = (0..self.value(x).numel())
            .map(|_| rng.random::<f64>() < keep_p)
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let out = Tensor::new(self.value(x).shape().clone(), data)?;
        self.push("dropout", out, Op::Dropout { x, keep, scale })
    }

    /// [B, ..., C] -> [B, C], averaging over all middle dims.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("want >= 3-D input, got {}", self.value(x).shape())));
        }
        let (b, c) = (xd[0], *xd.last().expect("nonempty"));
        let mid: usize = xd[1..xd.len() - 1].iter().product();
        let xs = self.value(x).data();
        let inv = T::one() / T::lit(mid as f64);
        let mut out = vec![T::zero(); b * c];
        for bb in 0..b {
            for i in 0..mid {
                for ch in 0..c {
                    out[bb * c + ch] += xs[(bb * mid + i) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let out = Tensor::from_vec(vec![b, c], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool { x })
    }

    /// Mean cross-entropy from logits over the batch.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let ld = self.value(logits).dims().to_vec();
        if ld.len() != 2 || ld[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {} vs {} labels", self.value(logits).shape(), labels.len()),
            ));
        }
        let (b, k) = (ld[0], ld[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!("label {bad} out of range for {k} classes")));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &xs[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / sum;
            }
            loss += sum.ln() + mx - row[labels[i]];
        }
        loss = loss / T::lit(b as f64);
        let out = Tensor::from_vec(vec![1], vec![loss])?;
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn reshape(&mut self, x: TensorId, dims: impl Into<Vec<usize>>) -> Result<TensorId> {
        let out = self.value(x).reshaped(dims)?;
        self.push("reshape", out, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        let nd = xd.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} not a permutation of 0..{nd}")));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| xd[a]).collect();
        let data = permute_data(self.value(x).data(), &xd, axes);
        let out = Tensor::from_vec(out_dims, data)?;
        self.push("permute", out, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn narrow_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 2 || start + len > xd[0] || len == 0 {
            return Err(Error::shape(
                "narrow_rows",
                format!("rows {start}..{} of {}", start + len, self.value(x).shape()),
            ));
        }
        let c = xd[1];
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(vec![len, c], data)?;
        self.push("narrow_rows", out, Op::NarrowRows { x, start })
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts"));
        }
        let c = self.value(parts[0]).dims()[1];
        let mut rows = 0;
        for &p in parts {
            let pd = self.value(p).dims();
            if pd.len() != 2 || pd[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_string(),
                    rhs: self.value(p).shape().to_string(),
                });
            }
            rows += pd[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(vec![rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).data().iter().cloned().sum();
        let out = Tensor::from_vec(vec![1], vec![s])?;
        self.push("sum_all", out, Op::SumAll { x })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar node. Gradients of earlier calls are
    /// discarded; replaying an identical tape yields bit-identical gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "target must be a scalar"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        let fault = self.softmax_grad_fault;
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backward_node(&self.nodes, &mut self.grads, i, &g, fault);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

// ── Backward kernels ────────────────────────────────────────────────────

fn acc_into<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: TensorId,
    delta: &[T],
) {
    let buf = grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.numel()]);
    for (b, &d) in buf.iter_mut().zip(delta) {
        *b += d;
    }
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
    fault: Option<T>,
) {
    match &nodes[i].op {
        Op::Leaf => {}

        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].value.dims()[0], nodes[a.0].value.dims()[1]);
            let n = nodes[b.0].value.dims()[1];
            let da = mm_nt(g, nodes[b.0].value.data(), m, n, k);
            let db = mm_tn(nodes[a.0].value.data(), g, m, k, n);
            acc_into(nodes, grads, *a, &da);
            acc_into(nodes, grads, *b, &db);
        }

        Op::MatmulNT { a, b } => {
            let (m, k) = (nodes[a.0].value.dims()[0], nodes[a.0].value.dims()[1]);
            let n = nodes[b.0].value.dims()[0];
            let da = mm(g, nodes[b.0].value.data(), m, n, k);
            let db = mm_tn(g, nodes[a.0].value.data(), m, n, k);
            acc_into(nodes, grads, *a, &da);
            acc_into(nodes, grads, *b, &db);
        }

        Op::Add { a, b } => {
            acc_into(nodes, grads, *a, g);
            acc_into(nodes, grads, *b, g);
        }

        Op::MulElem { a, b } => {
            let da: Vec<T> = g.iter().zip(nodes[b.0].value.data()).map(|(&gv, &bv)| gv * bv).collect();
            let db: Vec<T> = g.iter().zip(nodes[a.0].value.data()).map(|(&gv, &av)| gv * av).collect();
            acc_into(nodes, grads, *a, &da);
            acc_into(nodes, grads, *b, &db);
        }

        Op::AddBias { x, bias } => {
            acc_into(nodes, grads, *x, g);
            let c = nodes[bias.0].value.numel();
            let mut db = vec![T::zero(); c];
            for (i, &gv) in g.iter().enumerate() {
                db[i % c] += gv;
            }
            acc_into(nodes, grads, *bias, &db);
        }

        Op::Relu { x } => {
            let dx: Vec<T> = g
                .iter()
                .zip(nodes[x.0].value.data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            acc_into(nodes, grads, *x, &dx);
        }

        Op::SoftmaxRows { x, mask } => {
            let dims = nodes[i].value.dims();
            let (r, c) = (dims[0], dims[1]);
            let p = nodes[i].value.data();
            let mut dx = vec![T::zero(); r * c];
            for row in 0..r {
                let mut dot = T::zero();
                for j in 0..c {
                    dot += g[row * c + j] * p[row * c + j];
                }
                for j in 0..c {
                    let keep = mask.as_ref().map_or(true, |m| m[row * c + j]);
                    if keep {
                        dx[row * c + j] = p[row * c + j] * (g[row * c + j] - dot);
                    }
                }
            }
            if let Some(eps) = fault {
                for v in dx.iter_mut() {
                    *v += eps;
                }
            }
            acc_into(nodes, grads, *x, &dx);
        }

        Op::DivRowCount { x, mask, counts } => {
            let dims = nodes[i].value.dims();
            let (r, c) = (dims[0], dims[1]);
            let mut dx = vec![T::zero(); r * c];
            for row in 0..r {
                for j in 0..c {
                    if mask.as_ref().map_or(true, |m| m[row * c + j]) {
                        dx[row * c + j] = g[row * c + j] / counts[row];
                    }
                }
            }
            acc_into(nodes, grads, *x, &dx);
        }

        Op::OuterAdd { u, v } => {
            let n = nodes[u.0].value.numel();
            let m = nodes[v.0].value.numel();
            let mut du = vec![T::zero(); n];
            let mut dv = vec![T::zero(); m];
            for i2 in 0..n {
                for j in 0..m {
                    let gv = g[i2 * m + j];
                    du[i2] += gv;
                    dv[j] += gv;
                }
            }
            acc_into(nodes, grads, *u, &du);
            acc_into(nodes, grads, *v, &dv);
        }

        Op::Conv3d { x, w, spec } => {
            let xd = nodes[x.0].value.dims().to_vec();
            let wd = nodes[w.0].value.dims().to_vec();
            let od = nodes[i].value.dims().to_vec();
            let (dx, dw) = conv3d_backward(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                g,
                &xd,
                &wd,
                &od,
                spec,
            );
            acc_into(nodes, grads, *x, &dx);
            acc_into(nodes, grads, *w, &dw);
        }

        Op::MaxPool3d { x, argmax } => {
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g[o];
            }
            acc_into(nodes, grads, *x, &dx);
        }

        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let c = mean.len();
            let xs = nodes[x.0].value.data();
            let s = xs.len() / c;
            let gam = nodes[gamma.0].value.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut sum_dxhat = vec![T::zero(); c];
            let mut sum_dxhat_xhat = vec![T::zero(); c];
            for i2 in 0..s {
                for ch in 0..c {
                    let idx = i2 * c + ch;
                    let xhat = (xs[idx] - mean[ch]) * inv_std[ch];
                    let gv = g[idx];
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * xhat;
                    let dxhat = gv * gam[ch];
                    sum_dxhat[ch] += dxhat;
                    sum_dxhat_xhat[ch] += dxhat * xhat;
                }
            }
            let inv_s = T::one() / T::lit(s as f64);
            let mut dx = vec![T::zero(); xs.len()];
            for i2 in 0..s {
                for ch in 0..c {
                    let idx = i2 * c + ch;
                    let xhat = (xs[idx] - mean[ch]) * inv_std[ch];
                    let dxhat = g[idx] * gam[ch];
                    dx[idx] = inv_std[ch]
                        * (dxhat - inv_s * sum_dxhat[ch] - xhat * inv_s * sum_dxhat_xhat[ch]);
                }
            }
            acc_into(nodes, grads, *x, &dx);
            acc_into(nodes, grads, *gamma, &dgamma);
            acc_into(nodes, grads, *beta, &dbeta);
        }

        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let c = mean.len();
            let xs = nodes[x.0].value.data();
            let s = xs.len() / c;
            let gam = nodes[gamma.0].value.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); xs.len()];
            for i2 in 0..s {
                for ch in 0..c {
                    let idx = i2 * c + ch;
                    let xhat = (xs[idx] - mean[ch]) * inv_std[ch];
                    let gv = g[idx];
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * xhat;
                    dx[idx] = gv * gam[ch] * inv_std[ch];
                }
            }
            acc_into(nodes, grads, *x, &dx);
            acc_into(nodes, grads, *gamma, &dgamma);
            acc_into(nodes, grads, *beta, &dbeta);
        }

        Op::Dropout { x, keep, scale } => {
            let dx: Vec<T> = g
                .iter()
                .zip(keep)
                .map(|(&gv, &k)| if k { gv * *scale } else { T::zero() })
                .collect();
            acc_into(nodes, grads, *x, &dx);
        }

        Op::GlobalAvgPool { x } => {
            let xd = nodes[x.0].value.dims();
            let (b, c) = (xd[0], *xd.last().expect("nonempty"));
            let mid: usize = xd[1..xd.len() - 1].iter().product();
            let inv = T::one() / T::lit(mid as f64);
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            for bb in 0..b {
                for i2 in 0..mid {
                    for ch in 0..c {
                        dx[(bb * mid + i2) * c + ch] = g[bb * c + ch] * inv;
                    }
                }
            }
            acc_into(nodes, grads, *x, &dx);
        }

        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let ld = nodes[logits.0].value.dims();
            let (b, k) = (ld[0], ld[1]);
            let scale = g[0] / T::lit(b as f64);
            let mut dl = vec![T::zero(); b * k];
            for i2 in 0..b {
                for j in 0..k {
                    let onehot = if labels[i2] == j { T::one() } else { T::zero() };
                    dl[i2 * k + j] = scale * (probs[i2 * k + j] - onehot);
                }
            }
            acc_into(nodes, grads, *logits, &dl);
        }

        Op::Reshape { x } => {
            acc_into(nodes, grads, *x, g);
        }

        Op::Permute { x, axes } => {
            // invert the permutation and remap the gradient back
            let mut inv = vec![0usize; axes.len()];
            for (pos, &a) in axes.iter().enumerate() {
                inv[a] = pos;
            }
            let od = nodes[i].value.dims().to_vec();
            let dx = permute_data(g, &od, &inv);
            acc_into(nodes, grads, *x, &dx);
        }

        Op::NarrowRows { x, start } => {
            let c = nodes[x.0].value.dims()[1];
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            acc_into(nodes, grads, *x, &dx);
        }

        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                acc_into(nodes, grads, p, &g[offset..offset + n]);
                offset += n;
            }
        }

        Op::SumAll { x } => {
            let dx = vec![g[0]; nodes[x.0].value.numel()];
            acc_into(nodes, grads, *x, &dx);
        }
    }
}

// ── Dense kernels ───────────────────────────────────────────────────────

/// c[MxN] = a[MxK] . b[KxN]
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c[MxN] = a[MxK] . b[NxK]^T
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// c[MxN] = a[KxM]^T . b[KxN]
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn conv_out_dims(xd: &[usize], wd: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    let mut out = vec![xd[0], 0, 0, 0, wd[4]];
    for ax in 0..3 {
        let (l, k, s, p) = (xd[1 + ax], wd[ax], spec.stride[ax], spec.pad[ax]);
        if s == 0 {
            return Err(Error::shape("conv3d", "stride must be >= 1"));
        }
        if k > l + 2 * p {
            return Err(Error::shape(
                "conv3d",
                format!("kernel {k} larger than padded input {} on axis {ax}", l + 2 * p),
            ));
        }
        out[1 + ax] = (l + 2 * p - k) / s + 1;
    }
    Ok(out)
}

/// Maps an output tap to an input time index, or None when it falls into
/// zero padding.
#[inline]
fn time_index(raw: isize, t: usize, mode: TimePad) -> Option<usize> {
    if raw >= 0 && (raw as usize) < t {
        return Some(raw as usize);
    }
    match mode {
        TimePad::Zero => None,
        TimePad::Replicate => Some(raw.clamp(0, t as isize - 1) as usize),
    }
}

fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    xd: &[usize],
    wd: &[usize],
    od: &[usize],
    spec: &ConvSpec,
) -> Vec<T> {
    let (b, ti, hi, wi, ci) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    let (kt, kh, kw, _, co) = (wd[0], wd[1], wd[2], wd[3], wd[4]);
    let (ot, oh, ow) = (od[1], od[2], od[3]);
    let mut out = vec![T::zero(); b * ot * oh * ow * co];
    let mut acc = vec![T::zero(); co];
    for bb in 0..b {
        for t in 0..ot {
            for h in 0..oh {
                for ww in 0..ow {
                    acc.iter_mut().for_each(|v| *v = T::zero());
                    for dt in 0..kt {
                        let raw = (t * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                        let Some(it) = time_index(raw, ti, spec.time_pad) else {
                            continue;
                        };
                        for dh in 0..kh {
                            let ih = (h * spec.stride[1] + dh) as isize - spec.pad[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let iw = (ww * spec.stride[2] + dw) as isize - spec.pad[2] as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let xbase = ((((bb * ti + it) * hi + ih as usize) * wi)
                                    + iw as usize)
                                    * ci;
                                let wbase = ((dt * kh + dh) * kw + dw) * ci * co;
                                for c in 0..ci {
                                    let xv = x[xbase + c];
                                    let wrow = &w[wbase + c * co..wbase + (c + 1) * co];
                                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                                        *a += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                    let obase = (((bb * ot + t) * oh + h) * ow + ww) * co;
                    out[obase..obase + co].copy_from_slice(&acc);
                }
            }
        }
    }
    out
}

fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    xd: &[usize],
    wd: &[usize],
    od: &[usize],
    spec: &ConvSpec,
) -> (Vec<T>, Vec<T>) {
    let (b, ti, hi, wi, ci) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    let (kt, kh, kw, _, co) = (wd[0], wd[1], wd[2], wd[3], wd[4]);
    let (ot, oh, ow) = (od[1], od[2], od[3]);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for bb in 0..b {
        for t in 0..ot {
            for h in 0..oh {
                for ww in 0..ow {
                    let obase = (((bb * ot + t) * oh + h) * ow + ww) * co;
                    let gy = &dy[obase..obase + co];
                    for dt in 0..kt {
                        let raw = (t * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                        let Some(it) = time_index(raw, ti, spec.time_pad) else {
                            continue;
                        };
                        for dh in 0..kh {
                            let ih = (h * spec.stride[1] + dh) as isize - spec.pad[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            for dw2 in 0..kw {
                                let iw = (ww * spec.stride[2] + dw2) as isize - spec.pad[2] as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let xbase = ((((bb * ti + it) * hi + ih as usize) * wi)
                                    + iw as usize)
                                    * ci;
                                let wbase = ((dt * kh + dh) * kw + dw2) * ci * co;
                                for c in 0..ci {
                                    let xv = x[xbase + c];
                                    let wrow = &w[wbase + c * co..wbase + (c + 1) * co];
                                    let dwrow = &mut dw[wbase + c * co..wbase + (c + 1) * co];
                                    let mut s = T::zero();
                                    for ((&gv, &wv), dwv) in
                                        gy.iter().zip(wrow).zip(dwrow.iter_mut())
                                    {
                                        s += gv * wv;
                                        *dwv += xv * gv;
                                    }
                                    dx[xbase + c] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn permute_data<T: Scalar>(x: &[T], xd: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = xd.len();
    let out_dims: Vec<usize> = axes.iter().map(|&a| xd[a]).collect();
    // in_strides of the source, walked in output order
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * xd[i + 1];
    }
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.len();
    let mut out = vec![T::zero(); numel];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        // odometer increment in output order
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += walk[d];
            if idx[d] < out_dims[d] {
                break;
            }
            src -= walk[d] * out_dims[d];
            idx[d] = 0;
        }
    }
    debug_assert_eq!(out.len(), numel);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn seeded(n: u64) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(n)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::from_vec(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::rand_uniform(vec![3, 5], -1.0, 1.0, &mut seeded(1));
        let a = tape.leaf(eye).unwrap();
        let b = tape.leaf(x.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert!(tape.value(c).bit_eq(&x));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = seeded(2);
        let a = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ia = tape.leaf(a.clone()).unwrap();
        let ib = tape.leaf(b.clone()).unwrap();
        let ic = tape.matmul(ia, ib).unwrap();
        let want = oracle::naive_matmul(&a, &b);
        assert!(tape.value(ic).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn matmul_hand_checked() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![4, 5])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("[4x5]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let s = tape.softmax_rows(x, None).unwrap();
        let out = tape.value(s).data();
        for v in &out[..3] {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
        assert!((out[3] - 1.0).abs() <= 1e-12);
        assert!(out[4] >= 0.0 && out[4] <= 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_naive() {
        let x = Tensor::<f64>::rand_uniform(vec![5, 7], -2.0, 2.0, &mut seeded(3));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let is = tape.softmax_rows(ix, None).unwrap();
        let got = tape.value(is);
        let want = oracle::naive_softmax_rows(&x);
        assert!(got.max_abs_diff(&want) <= 1e-12);
        for i in 0..5 {
            let sum: f64 = got.data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv3d_identity_kernel() {
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3, 1], -1.0, 1.0, &mut seeded(4));
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let iw = tape.leaf(w).unwrap();
        let spec = ConvSpec {
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            time_pad: TimePad::Zero,
        };
        let iy = tape.conv3d(ix, iw, spec).unwrap();
        assert!(tape.value(iy).bit_eq(&x));
    }

    #[test]
    fn conv3d_matches_per_frame_2d_oracle() {
        let mut rng = seeded(5);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 5, 5, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(vec![1, 3, 3, 2, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec {
            stride: [1, 1, 1],
            pad: [0, 1, 1],
            time_pad: TimePad::Zero,
        };
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let iw = tape.leaf(w.clone()).unwrap();
        let iy = tape.conv3d(ix, iw, spec).unwrap();
        let want = oracle::naive_conv_per_frame_2d(&x, &w, [1, 1], [1, 1]);
        assert!(tape.value(iy).max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn conv3d_all_ones_on_constant_field() {
        let c = 0.37;
        let x = Tensor::<f64>::full(vec![1, 4, 5, 5, 1], c);
        let w = Tensor::<f64>::full(vec![3, 3, 3, 1, 1], 1.0);
        let spec = ConvSpec {
            stride: [1, 1, 1],
            pad: [1, 1, 1],
            time_pad: TimePad::Replicate,
        };
        let mut tape = Tape::new();
        let ix = tape.leaf(x).unwrap();
        let iw = tape.leaf(w).unwrap();
        let iy = tape.conv3d(ix, iw, spec).unwrap();
        let out = tape.value(iy);
        // interior spatial positions see the full 27-tap sum
        let dims = out.dims().to_vec();
        for t in 0..dims[1] {
            for h in 1..dims[2] - 1 {
                for ww in 1..dims[3] - 1 {
                    let idx = ((t * dims[2] + h) * dims[3] + ww) * dims[4];
                    assert!((out.data()[idx] - 27.0 * c).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv3d_kernel_too_large_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 1])).unwrap();
        let w = tape.leaf(Tensor::zeros(vec![1, 5, 5, 1, 1])).unwrap();
        let spec = ConvSpec {
            stride: [1, 1, 1],
            pad: [0, 1, 1],
            time_pad: TimePad::Zero,
        };
        assert!(matches!(tape.conv3d(x, w, spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn max_pool_window_one_is_identity() {
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3, 2], -1.0, 1.0, &mut seeded(6));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let iy = tape
            .max_pool3d(
                ix,
                PoolGeom {
                    window: [1, 1, 1],
                    stride: [1, 1, 1],
                    pad: [0, 0, 0],
                },
            )
            .unwrap();
        assert!(tape.value(iy).bit_eq(&x));
    }

    #[test]
    fn max_pool_matches_loop_oracle() {
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4, 1], -1.0, 1.0, &mut seeded(7));
        let geom = PoolGeom {
            window: [1, 2, 2],
            stride: [1, 2, 2],
            pad: [0, 0, 0],
        };
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let iy = tape.max_pool3d(ix, geom).unwrap();
        let want = oracle::naive_max_pool3d(&x, geom.window, geom.stride, geom.pad);
        assert!(tape.value(iy).bit_eq(&want));
    }

    #[test]
    fn max_pool_window_exceeding_extent_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 1])).unwrap();
        let geom = PoolGeom {
            window: [1, 5, 5],
            stride: [1, 1, 1],
            pad: [0, 1, 1],
        };
        assert!(matches!(tape.max_pool3d(x, geom), Err(Error::Shape { .. })));
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(vec![1, 1], 1e308)).unwrap();
        let b = tape.leaf(Tensor::full(vec![1, 1], 1e308)).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_replay_is_bit_identical() {
        let run = || {
            let mut rng = seeded(8);
            let mut tape = Tape::<f64>::new();
            let a = tape
                .leaf(Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng))
                .unwrap();
            let b = tape
                .leaf(Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng))
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let r = tape.relu(c).unwrap();
            let s = tape.softmax_rows(r, None).unwrap();
            let l = tape.sum_all(s).unwrap();
            tape.backward(l).unwrap();
            (
                tape.grad(a).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            )
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(
            ga1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ga2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            gb1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            gb2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut seeded(9));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()).unwrap();
        let ip = tape.permute(ix, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(ip).dims(), &[4, 2, 3]);
        let back = tape.permute(ip, &[1, 2, 0]).unwrap();
        assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn cross_entropy_matches_hand_formula() {
        let mut tape = Tape::<f64>::new();
        let logits = tape
            .leaf(Tensor::from_vec(vec![2, 3], vec![2.0, 1.0, 0.1, 0.1, 2.0, 1.0]).unwrap())
            .unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
        let lse0 = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
        let lse1 = (0.1f64.exp() + 2.0f64.exp() + 1.0f64.exp()).ln();
        let want = ((lse0 - 2.0) + (lse1 - 2.0)) / 2.0;
        assert!((tape.value(loss).data()[0] - want).abs() <= 1e-12);
    }
}
