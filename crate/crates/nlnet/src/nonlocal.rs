//! The non-local operation and the residual non-local block.
//!
//! For input positions i the operation computes
//! `y_i = (1/C(x)) * sum_j f(x_i, x_hat_j) g(x_hat_j)` over all key positions
//! j, where theta/phi/g are 1x1x1 convolutions (row-wise linear maps) and
//! `x_hat` is an optionally subsampled version of the keys and values. The
//! block wraps the operation as `z_i = BN(W_z y_i) + x_i`; with the batch
//! norm scale initialized to zero the block is an exact identity, so it can
//! be inserted anywhere without changing behavior.

use crate::error::{Error, Result};
use crate::layers::{he_std, BatchNorm, ForwardCtx, ParamKind, RunMode};
use crate::mask::{build_mask, MaskMode};
use crate::pairwise::{normalize, pairwise_scores, AffinityMatrix, PairwiseKind};
use crate::scalar::Scalar;
use crate::tape::{PoolGeom, Tape, TensorId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Configuration of one non-local block.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NonLocalConfig {
    pub kind: PairwiseKind,
    pub channels_in: usize,
    /// Embedding width of theta/phi/g; defaults to half the input channels
    /// (the bottleneck design).
    pub bottleneck: usize,
    pub mask: MaskMode,
    /// Spatial subsampling factor for keys and values; 1 or 2.
    pub subsample_spatial: usize,
    /// Batch-normalize the W_z output (the zero-gamma identity trick). When
    /// disabled, W_z itself is zero-initialized to preserve identity at init.
    pub use_bn_on_wz: bool,
}

impl NonLocalConfig {
    pub fn new(kind: PairwiseKind, channels_in: usize) -> Self {
        NonLocalConfig {
            kind,
            channels_in,
            bottleneck: (channels_in / 2).max(1),
            mask: MaskMode::Spacetime,
            subsample_spatial: 1,
            use_bn_on_wz: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.bottleneck == 0 {
            return Err(Error::config("non-local channels and bottleneck must be >= 1"));
        }
        if !matches!(self.subsample_spatial, 1 | 2) {
            return Err(Error::config(format!(
                "subsample factor must be 1 or 2, got {}",
                self.subsample_spatial
            )));
        }
        if self.mask == MaskMode::TimeOnly && self.subsample_spatial != 1 {
            return Err(Error::config(
                "time_only mask cannot be combined with spatial subsampling",
            ));
        }
        Ok(())
    }

    pub fn validate_for_input(&self, t: usize, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let s = self.subsample_spatial;
        if h % s != 0 || w % s != 0 {
            return Err(Error::config(format!(
                "subsample factor {s} must divide spatial extents {h}x{w}"
            )));
        }
        let _ = t;
        Ok(())
    }

    /// Width of the query/key vectors fed to the pairwise function: the raw
    /// channel count for the plain Gaussian, the bottleneck otherwise.
    pub fn pairwise_width(&self) -> usize {
        if self.kind.uses_embeddings() {
            self.bottleneck
        } else {
            self.channels_in
        }
    }
}

/// Learnable state of one block. W_theta/W_phi are absent for the plain
/// Gaussian kind; w_f exists only for concatenation.
#[derive(Clone, Debug)]
pub struct NonLocalParams<T> {
    /// [C, b]
    pub w_g: Tensor<T>,
    pub w_theta: Option<Tensor<T>>,
    pub w_phi: Option<Tensor<T>>,
    /// [2b], concatenation only
    pub w_f: Option<Tensor<T>>,
    /// [b, C]
    pub w_z: Tensor<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> NonLocalParams<T> {
    /// Fan-in scaled random init for the embeddings; the output path starts
    /// at exact zero (bn gamma = 0, or W_z = 0 when bn is disabled) so a
    /// fresh block is an identity mapping.
    pub fn init(name: &str, cfg: &NonLocalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, b) = (cfg.channels_in, cfg.bottleneck);
        let w_g = Tensor::randn(vec![c, b], he_std(c), rng);
        let (w_theta, w_phi) = if cfg.kind.uses_embeddings() {
            (
                Some(Tensor::randn(vec![c, b], he_std(c), rng)),
                Some(Tensor::randn(vec![c, b], he_std(c), rng)),
            )
        } else {
            (None, None)
        };
        let w_f = match cfg.kind {
            PairwiseKind::Concatenation => Some(Tensor::randn(vec![2 * b], he_std(2 * b), rng)),
            _ => None,
        };
        let w_z = if cfg.use_bn_on_wz {
            Tensor::randn(vec![b, c], he_std(b), rng)
        } else {
            Tensor::zeros(vec![b, c])
        };
        let mut bn = BatchNorm::new(format!("{name}.bn"), c, 0.0);
        bn.momentum = 0.9;
        Ok(NonLocalParams {
            w_g,
            w_theta,
            w_phi,
            w_f,
            w_z,
            bn,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{prefix}.w_g"), &self.w_g, ParamKind::Trainable);
        if let Some(t) = &self.w_theta {
            f(&format!("{prefix}.w_theta"), t, ParamKind::Trainable);
        }
        if let Some(t) = &self.w_phi {
            f(&format!("{prefix}.w_phi"), t, ParamKind::Trainable);
        }
        if let Some(t) = &self.w_f {
            f(&format!("{prefix}.w_f"), t, ParamKind::Trainable);
        }
        f(&format!("{prefix}.w_z"), &self.w_z, ParamKind::Trainable);
        self.bn.visit(f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{prefix}.w_g"), &mut self.w_g, ParamKind::Trainable);
        if let Some(t) = &mut self.w_theta {
            f(&format!("{prefix}.w_theta"), t, ParamKind::Trainable);
        }
        if let Some(t) = &mut self.w_phi {
            f(&format!("{prefix}.w_phi"), t, ParamKind::Trainable);
        }
        if let Some(t) = &mut self.w_f {
            f(&format!("{prefix}.w_f"), t, ParamKind::Trainable);
        }
        f(&format!("{prefix}.w_z"), &mut self.w_z, ParamKind::Trainable);
        self.bn.visit_mut(f);
    }
}

/// Tape leaves of a block's embedding/projection weights.
#[derive(Clone, Copy, Debug)]
pub struct BoundNonLocal {
    pub w_g: TensorId,
    pub w_theta: Option<TensorId>,
    pub w_phi: Option<TensorId>,
    pub w_f: Option<TensorId>,
    pub w_z: TensorId,
}

impl BoundNonLocal {
    /// Bind the weights as anonymous leaves (library-level entry point).
    pub fn leaves<T: Scalar>(tape: &mut Tape<T>, p: &NonLocalParams<T>) -> Result<Self> {
        Ok(BoundNonLocal {
            w_g: tape.leaf(p.w_g.clone())?,
            w_theta: p.w_theta.as_ref().map(|t| tape.leaf(t.clone())).transpose()?,
            w_phi: p.w_phi.as_ref().map(|t| tape.leaf(t.clone())).transpose()?,
            w_f: p.w_f.as_ref().map(|t| tape.leaf(t.clone())).transpose()?,
            w_z: tape.leaf(p.w_z.clone())?,
        })
    }

    /// Bind with names recorded in the forward context (backbone path).
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<'_>,
        prefix: &str,
        p: &NonLocalParams<T>,
    ) -> Result<Self> {
        let opt = |tape: &mut Tape<T>,
                   ctx: &mut ForwardCtx<'_>,
                   t: &Option<Tensor<T>>,
                   n: &str|
         -> Result<Option<TensorId>> {
            t.as_ref()
                .map(|t| ctx.bind(tape, &format!("{prefix}.{n}"), t))
                .transpose()
        };
        Ok(BoundNonLocal {
            w_g: ctx.bind(tape, &format!("{prefix}.w_g"), &p.w_g)?,
            w_theta: opt(tape, ctx, &p.w_theta, "w_theta")?,
            w_phi: opt(tape, ctx, &p.w_phi, "w_phi")?,
            w_f: opt(tape, ctx, &p.w_f, "w_f")?,
            w_z: ctx.bind(tape, &format!("{prefix}.w_z"), &p.w_z)?,
        })
    }
}

/// Output of the non-local operation: y has the bottleneck width; the
/// per-clip normalized affinity matrices are kept for visualization.
pub struct NonLocalOut {
    pub y: TensorId,
    pub affinity: Vec<AffinityMatrix>,
}

/// The non-local operation on x[B,T,H,W,C]. Affinities never mix batch
/// items. Output is [B,T,H,W,bottleneck]; the W_z projection belongs to
/// [`block_forward_bound`].
pub fn nonlocal_forward_bound<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    bound: &BoundNonLocal,
    cfg: &NonLocalConfig,
) -> Result<NonLocalOut> {
    let xd = tape.value(x).dims().to_vec();
    if xd.len() != 5 {
        return Err(Error::shape("nonlocal_forward", format!("want [B,T,H,W,C], got {}", tape.value(x).shape())));
    }
    let (bsz, t, h, w, c) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    if c != cfg.channels_in {
        return Err(Error::config(format!(
            "input has {c} channels but the block is configured for {}",
            cfg.channels_in
        )));
    }
    cfg.validate_for_input(t, h, w)?;
    let n = t * h * w;
    let s = cfg.subsample_spatial;
    let m = t * (h / s) * (w / s);

    // channels-last makes the NxC flattening a pure reshape
    let xf = tape.reshape(x, vec![bsz * n, c])?;

    let g_all = tape.matmul(xf, bound.w_g)?;
    let (q_all, k_all, dk) = if cfg.kind.uses_embeddings() {
        let th = bound
            .w_theta
            .ok_or_else(|| Error::config("missing w_theta for embedded kind"))?;
        let ph = bound
            .w_phi
            .ok_or_else(|| Error::config("missing w_phi for embedded kind"))?;
        (tape.matmul(xf, th)?, tape.matmul(xf, ph)?, cfg.bottleneck)
    } else {
        // plain Gaussian queries and keys are the raw signal
        (xf, xf, c)
    };

    // the subsampling trick: max-pool keys and values spatially
    let pool = |tape: &mut Tape<T>, v: TensorId, width: usize| -> Result<TensorId> {
        let grid = tape.reshape(v, vec![bsz, t, h, w, width])?;
        let pooled = tape.max_pool3d(
            grid,
            PoolGeom {
                window: [1, s, s],
                stride: [1, s, s],
                pad: [0, 0, 0],
            },
        )?;
        tape.reshape(pooled, vec![bsz * m, width])
    };
    let (k_all, v_all) = if s > 1 {
        (pool(tape, k_all, dk)?, pool(tape, g_all, cfg.bottleneck)?)
    } else {
        (k_all, g_all)
    };

    let mask = build_mask(cfg.mask, t, h, w, s)?;

    let mut parts = Vec::with_capacity(bsz);
    let mut affinity = Vec::with_capacity(bsz);
    for item in 0..bsz {
        let q_i = tape.narrow_rows(q_all, item * n, n)?;
        let k_i = tape.narrow_rows(k_all, item * m, m)?;
        let v_i = tape.narrow_rows(v_all, item * m, m)?;
        let scores = pairwise_scores(tape, cfg.kind, q_i, k_i, bound.w_f)?;
        let probs = normalize(tape, scores, mask.clone())?;
        let y_i = tape.matmul(probs.values, v_i)?;
        parts.push(y_i);
        affinity.push(probs);
    }
    let y = tape.concat_rows(&parts)?;
    let y = tape.reshape(y, vec![bsz, t, h, w, cfg.bottleneck])?;
    Ok(NonLocalOut { y, affinity })
}

/// The residual block around the non-local operation: z = BN(W_z y) + x,
/// with parameters bound through `ctx` under `prefix`. Returns the output
/// and the per-clip normalized affinities.
pub fn block_forward_with_ctx<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_>,
    prefix: &str,
    x: TensorId,
    p: &mut NonLocalParams<T>,
    cfg: &NonLocalConfig,
) -> Result<(TensorId, Vec<AffinityMatrix>)> {
    let xd = tape.value(x).dims().to_vec();
    let bound = BoundNonLocal::bind(tape, ctx, prefix, p)?;
    let out = nonlocal_forward_bound(tape, x, &bound, cfg)?;
    let (bsz, t, h, w, c) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    let n = t * h * w;
    let yf = tape.reshape(out.y, vec![bsz * n, cfg.bottleneck])?;
    let wz_out = tape.matmul(yf, bound.w_z)?;
    let normed = if cfg.use_bn_on_wz {
        p.bn.forward(tape, ctx, wz_out)?
    } else {
        wz_out
    };
    let grid = tape.reshape(normed, vec![bsz, t, h, w, c])?;
    let z = tape.add(grid, x)?;
    Ok((z, out.affinity))
}

/// Library-level entry: binds `p` as anonymous leaves and runs the
/// operation (no W_z projection).
pub fn nonlocal_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    p: &NonLocalParams<T>,
    cfg: &NonLocalConfig,
) -> Result<NonLocalOut> {
    let bound = BoundNonLocal::leaves(tape, p)?;
    nonlocal_forward_bound(tape, x, &bound, cfg)
}

/// Library-level entry for the full block. Train mode normalizes with batch
/// statistics and folds them into the running estimates.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    p: &mut NonLocalParams<T>,
    cfg: &NonLocalConfig,
    mode: RunMode,
) -> Result<TensorId> {
    let mut ctx = ForwardCtx {
        mode,
        rng: None,
        binds: Vec::new(),
        captures: Vec::new(),
    };
    let (z, _) = block_forward_with_ctx(tape, &mut ctx, "nl", x, p, cfg)?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{self, OracleBn};
    use rand::SeedableRng;

    fn rng(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    fn run_block_eval(
        x: &Tensor<f64>,
        p: &mut NonLocalParams<f64>,
        cfg: &NonLocalConfig,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let b = x.dims()[0];
        assert_eq!(b, 1);
        let xid = tape.leaf(x.clone()).unwrap();
        let z = block_forward(&mut tape, xid, p, cfg, RunMode::Eval).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn fresh_block_is_exact_identity_for_every_kind() {
        for kind in PairwiseKind::ALL {
            for use_bn in [true, false] {
                let mut cfg = NonLocalConfig::new(kind, 6);
                cfg.use_bn_on_wz = use_bn;
                let mut p = NonLocalParams::init("nl", &cfg, &mut rng(31)).unwrap();
                let x = Tensor::rand_uniform(vec![1, 2, 2, 2, 6], -1.0, 1.0, &mut rng(32));
                let z = run_block_eval(&x, &mut p, &cfg);
                assert!(
                    z.data().iter().zip(x.data()).all(|(&a, &b)| a == b),
                    "identity violated for {kind:?} use_bn={use_bn}"
                );
            }
        }
    }

    #[test]
    fn constant_field_rows_are_identical_and_gaussian_kinds_return_g() {
        for kind in PairwiseKind::ALL {
            let mut cfg = NonLocalConfig::new(kind, 4);
            cfg.use_bn_on_wz = true;
            let p: NonLocalParams<f64> = NonLocalParams::init("nl", &cfg, &mut rng(33)).unwrap();
            let c = 0.6f64;
            let x = Tensor::full(vec![1, 2, 2, 2, 4], c);
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone()).unwrap();
            let out = nonlocal_forward(&mut tape, xid, &p, &cfg).unwrap();
            let y = tape.value(out.y);
            let b = cfg.bottleneck;
            let first = y.data()[..b].to_vec();
            for row in y.data().chunks(b) {
                for (a, f) in row.iter().zip(&first) {
                    assert!((a - f).abs() <= 1e-12, "rows differ for {kind:?}");
                }
            }
            if kind.is_gaussian() {
                // convex weights over identical values: y_i = g(c)
                let g_of_c: Vec<f64> = (0..b)
                    .map(|o| (0..4).map(|i| c * p.w_g.data()[i * b + o]).sum())
                    .collect();
                for (a, g) in first.iter().zip(&g_of_c) {
                    assert!((a - g).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn space_only_mask_isolates_frames_exactly() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 4);
        cfg.mask = MaskMode::SpaceOnly;
        let p = NonLocalParams::init("nl", &cfg, &mut rng(34)).unwrap();
        let x1 = Tensor::rand_uniform(vec![1, 2, 3, 3, 4], -1.0, 1.0, &mut rng(35));
        let mut x2 = x1.clone();
        // replace frame 1 wholesale
        let frame = 3 * 3 * 4;
        let repl = Tensor::<f64>::rand_uniform(vec![frame], -1.0, 1.0, &mut rng(36));
        x2.data_mut()[frame..2 * frame].copy_from_slice(repl.data());

        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone()).unwrap();
            let out = nonlocal_forward(&mut tape, xid, &p, &cfg).unwrap();
            tape.value(out.y).clone()
        };
        let (y1, y2) = (run(&x1), run(&x2));
        // frame 0 of the output is bit-identical
        let fb = 3 * 3 * cfg.bottleneck;
        assert_eq!(&y1.data()[..fb], &y2.data()[..fb]);
    }

    #[test]
    fn self_attention_equivalence() {
        let cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 6);
        let p: NonLocalParams<f64> = NonLocalParams::init("nl", &cfg, &mut rng(37)).unwrap();
        let x = Tensor::rand_uniform(vec![1, 2, 2, 2, 6], -1.0, 1.0, &mut rng(38));
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone()).unwrap();
        let out = nonlocal_forward(&mut tape, xid, &p, &cfg).unwrap();
        let got = tape.value(out.y).reshaped(vec![8, cfg.bottleneck]).unwrap();
        let xf = x.reshaped(vec![8, 6]).unwrap();
        let want = oracle::self_attention_reference(
            &xf,
            p.w_theta.as_ref().unwrap(),
            p.w_phi.as_ref().unwrap(),
            &p.w_g,
        );
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn gaussian_equals_embedded_gaussian_with_identity_embeddings() {
        let c = 4;
        let mut cfg_e = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, c);
        cfg_e.bottleneck = c; // square embeddings so identity W fits
        let mut p_e = NonLocalParams::init("nl", &cfg_e, &mut rng(39)).unwrap();
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

        let x = Tensor::rand_uniform(vec![1, 2, 2, 2, c], -1.0, 1.0, &mut rng(40));
        let run = |p: &NonLocalParams<f64>, cfg: &NonLocalConfig| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone()).unwrap();
            let out = nonlocal_forward(&mut tape, xid, p, cfg).unwrap();
            tape.value(out.y).clone()
        };
        let (ye, yg) = (run(&p_e, &cfg_e), run(&p_g, &cfg_g));
        assert!(ye.bit_eq(&yg), "identity embeddings must reproduce plain Gaussian exactly");
    }

    #[test]
    fn block_matches_loop_oracle_with_trained_params() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 8);
        cfg.use_bn_on_wz = true;
        let mut p = NonLocalParams::init("nl", &cfg, &mut rng(41)).unwrap();
        // pretend-trained: random bn affine and stats
        let mut r = rng(42);
        p.bn.gamma = Tensor::rand_uniform(vec![8], 0.5, 1.5, &mut r);
        p.bn.beta = Tensor::rand_uniform(vec![8], -0.3, 0.3, &mut r);
        p.bn.running_mean = Tensor::rand_uniform(vec![8], -0.2, 0.2, &mut r);
        p.bn.running_var = Tensor::rand_uniform(vec![8], 0.5, 1.5, &mut r);
        let x = Tensor::rand_uniform(vec![1, 2, 4, 4, 8], -1.0, 1.0, &mut r);
        let z = run_block_eval(&x, &mut p, &cfg);

        let xs = x.reshaped(vec![2, 4, 4, 8]).unwrap();
        let gamma: Vec<f64> = p.bn.gamma.data().to_vec();
        let beta: Vec<f64> = p.bn.beta.data().to_vec();
        let mean: Vec<f64> = p.bn.running_mean.data().to_vec();
        let var: Vec<f64> = p.bn.running_var.data().to_vec();
        let want = oracle::nonlocal_block_reference(
            &xs,
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
        let got = z.reshaped(vec![2, 4, 4, 8]).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-8);
    }

    #[test]
    fn time_only_with_subsampling_is_rejected() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::DotProduct, 4);
        cfg.mask = MaskMode::TimeOnly;
        cfg.subsample_spatial = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn subsample_must_divide_spatial_extents() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::DotProduct, 4);
        cfg.subsample_spatial = 2;
        assert!(cfg.validate_for_input(2, 3, 4).is_err());
        assert!(cfg.validate_for_input(2, 4, 4).is_ok());
    }

    #[test]
    fn variable_input_sizes_share_parameters() {
        let cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 4);
        let mut p: NonLocalParams<f64> = NonLocalParams::init("nl", &cfg, &mut rng(43)).unwrap();
        for dims in [[1, 1, 2, 2, 4], [1, 3, 4, 4, 4], [2, 2, 6, 6, 4]] {
            let x = Tensor::rand_uniform(dims.to_vec(), -1.0, 1.0, &mut rng(44));
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone()).unwrap();
            let z = block_forward(&mut tape, xid, &mut p, &cfg, RunMode::Eval).unwrap();
            assert_eq!(tape.value(z).dims(), x.dims());
        }
    }
}
