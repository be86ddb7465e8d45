//! Toy C2D / inflated I3D residual backbones with non-local block insertion.

mod checkpoint;
mod spec;

pub use checkpoint::{load_network, peek_spec, save_network};
pub use spec::{Inflation, NetworkSpec, NonLocalInsertion, NonLocalSettings, StageSpec};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, ConvLayer, ForwardCtx, LinearLayer, ParamKind, RunMode};
use crate::nonlocal::{block_forward_with_ctx, NonLocalConfig, NonLocalParams};
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, Tape, TensorId, TimePad};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard pre-classifier residual bottleneck block: 1x1 -> 3x3 -> 1x1 with
/// batch norm after each conv and a projection shortcut when shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub name: String,
    pub conv1: ConvLayer<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: ConvLayer<T>,
    pub bn2: BatchNorm<T>,
    pub conv3: ConvLayer<T>,
    pub bn3: BatchNorm<T>,
    pub shortcut: Option<(ConvLayer<T>, BatchNorm<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: String,
        in_ch: usize,
        bottleneck: usize,
        out_ch: usize,
        spatial_stride: usize,
        conv1_kernel: [usize; 3],
        conv2_kernel: [usize; 3],
        time_pad: TimePad,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let spec1 = ConvSpec {
            stride: [1, 1, 1],
            pad: [conv1_kernel[0] / 2, 0, 0],
            time_pad,
        };
        let spec2 = ConvSpec {
            stride: [1, spatial_stride, spatial_stride],
            pad: [conv2_kernel[0] / 2, conv2_kernel[1] / 2, conv2_kernel[2] / 2],
            time_pad,
        };
        let spec3 = ConvSpec {
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            time_pad,
        };
        let conv1 = ConvLayer::new(format!("{name}.conv1"), conv1_kernel, in_ch, bottleneck, spec1, rng);
        let bn1 = BatchNorm::new(format!("{name}.bn1"), bottleneck, 1.0);
        let conv2 = ConvLayer::new(format!("{name}.conv2"), conv2_kernel, bottleneck, bottleneck, spec2, rng);
        let bn2 = BatchNorm::new(format!("{name}.bn2"), bottleneck, 1.0);
        let conv3 = ConvLayer::new(format!("{name}.conv3"), [1, 1, 1], bottleneck, out_ch, spec3, rng);
        let bn3 = BatchNorm::new(format!("{name}.bn3"), out_ch, 1.0);
        let shortcut = if in_ch != out_ch || spatial_stride != 1 {
            let spec = ConvSpec {
                stride: [1, spatial_stride, spatial_stride],
                pad: [0, 0, 0],
                time_pad,
            };
            Some((
                ConvLayer::new(format!("{name}.shortcut.conv"), [1, 1, 1], in_ch, out_ch, spec, rng),
                BatchNorm::new(format!("{name}.shortcut.bn"), out_ch, 1.0),
            ))
        } else {
            None
        };
        ResidualBlock {
            name,
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            shortcut,
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>, x: TensorId) -> Result<TensorId> {
        let mut h = self.conv1.forward(tape, ctx, x)?;
        h = self.bn1.forward(tape, ctx, h)?;
        h = tape.relu(h)?;
        h = self.conv2.forward(tape, ctx, h)?;
        h = self.bn2.forward(tape, ctx, h)?;
        h = tape.relu(h)?;
        h = self.conv3.forward(tape, ctx, h)?;
        h = self.bn3.forward(tape, ctx, h)?;
        let sc = match &mut self.shortcut {
            None => x,
            Some((conv, bn)) => {
                let s = conv.forward(tape, ctx, x)?;
                bn.forward(tape, ctx, s)?
            }
        };
        let sum = tape.add(h, sc)?;
        tape.relu(sum)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.conv3.visit(f);
        self.bn3.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        self.conv3.visit_mut(f);
        self.bn3.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

/// A non-local block living between residual blocks.
#[derive(Clone, Debug)]
pub struct NonLocalLayer<T> {
    pub name: String,
    pub cfg: NonLocalConfig,
    pub params: NonLocalParams<T>,
}

impl<T: Scalar> NonLocalLayer<T> {
    fn forward(&mut self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>, x: TensorId) -> Result<TensorId> {
        ctx.capture(format!("{}.in", self.name), x);
        let (z, affinity) = block_forward_with_ctx(tape, ctx, &self.name, x, &mut self.params, &self.cfg)?;
        for (i, aff) in affinity.iter().enumerate() {
            ctx.capture(format!("{}.affinity.{}", self.name, i), aff.values);
        }
        Ok(z)
    }
}

#[derive(Clone, Debug)]
pub enum StageItem<T> {
    Residual(ResidualBlock<T>),
    NonLocal(NonLocalLayer<T>),
}

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub name: String,
    pub items: Vec<StageItem<T>>,
}

/// A built network: ordered layers plus the spec that produced them.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub conv1: ConvLayer<T>,
    pub bn1: BatchNorm<T>,
    pub stages: Vec<Stage<T>>,
    pub head: LinearLayer<T>,
}

/// Per-block kernels under an inflation state. One kernel is inflated for
/// every 2 residual blocks (even indices within each stage).
fn block_kernels(inflation: Inflation, block_idx: usize) -> ([usize; 3], [usize; 3]) {
    let inflate_this = block_idx % 2 == 0;
    match inflation {
        Inflation::None => ([1, 1, 1], [1, 3, 3]),
        Inflation::I3d3x3x3 if inflate_this => ([1, 1, 1], [3, 3, 3]),
        Inflation::I3d3x1x1 if inflate_this => ([3, 1, 1], [1, 3, 3]),
        _ => ([1, 1, 1], [1, 3, 3]),
    }
}

/// Construct a network from a (possibly rescaled) spec with seeded
/// fan-in-scaled initialization. Identical seeds give bit-identical
/// parameters.
pub fn build_network<T: Scalar>(
    spec: &NetworkSpec,
    width_scale: f64,
    depth_scale: f64,
    seed: u64,
) -> Result<Network<T>> {
    let spec = spec.scaled(width_scale, depth_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k1 = spec.conv1_kernel;
    let conv1 = ConvLayer::new(
        "conv1",
        k1,
        spec.in_channels,
        spec.conv1_channels,
        ConvSpec {
            stride: spec.conv1_stride,
            pad: [k1[0] / 2, k1[1] / 2, k1[2] / 2],
            time_pad: spec.time_pad,
        },
        &mut rng,
    );
    let bn1 = BatchNorm::new("bn1", spec.conv1_channels, 1.0);

    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut in_ch = spec.conv1_channels;
    for (si, st) in spec.stages.iter().enumerate() {
        let stage_number = si + 2;
        let mut items = Vec::new();
        for bi in 0..st.num_blocks {
            for ins in spec.nonlocal.iter().filter(|i| i.stage == stage_number && i.block == bi) {
                items.push(StageItem::NonLocal(make_nonlocal_layer(
                    &st.name, bi, in_ch, &ins.settings, &mut rng,
                )?));
            }
            let stride = if bi == 0 { st.spatial_stride } else { 1 };
            let (k1b, k2b) = block_kernels(spec.inflation, bi);
            items.push(StageItem::Residual(ResidualBlock::new(
                format!("{}.{}", st.name, bi),
                in_ch,
                st.bottleneck,
                st.out_channels,
                stride,
                k1b,
                k2b,
                spec.time_pad,
                &mut rng,
            )));
            in_ch = st.out_channels;
        }
        stages.push(Stage {
            name: st.name.clone(),
            items,
        });
    }
    let head = LinearLayer::new("head.fc", in_ch, spec.num_classes, &mut rng);
    Ok(Network {
        spec,
        conv1,
        bn1,
        stages,
        head,
    })
}

fn make_nonlocal_layer<T: Scalar>(
    stage_name: &str,
    block_idx: usize,
    channels: usize,
    settings: &NonLocalSettings,
    rng: &mut ChaCha8Rng,
) -> Result<NonLocalLayer<T>> {
    let name = format!("{stage_name}.nl{block_idx}");
    let mut cfg = NonLocalConfig::new(settings.kind, channels);
    cfg.mask = settings.mask;
    cfg.subsample_spatial = settings.subsample_spatial;
    cfg.use_bn_on_wz = settings.use_bn_on_wz;
    if let Some(b) = settings.bottleneck {
        cfg.bottleneck = b;
    }
    cfg.validate()?;
    let params = NonLocalParams::init(&name, &cfg, rng)?;
    Ok(NonLocalLayer { name, cfg, params })
}

impl<T: Scalar> Network<T> {
    /// Forward pass to logits [B, classes]. Input is [B,T,H,W,C]. Intermediate
    /// taps (conv1.out, res*.out, nl affinities, logits) are recorded in the
    /// context's captures.
    pub fn forward(&mut self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>, x: TensorId) -> Result<TensorId> {
        let xd = tape.value(x).dims().to_vec();
        if xd.len() != 5 || xd[4] != self.spec.in_channels {
            return Err(Error::shape(
                "network",
                format!("want [B,T,H,W,{}], got {}", self.spec.in_channels, tape.value(x).shape()),
            ));
        }
        let mut h = self.conv1.forward(tape, ctx, x)?;
        ctx.capture("conv1.out", h);
        h = self.bn1.forward(tape, ctx, h)?;
        h = tape.relu(h)?;
        h = tape.max_pool3d(h, self.spec.pool1)?;
        let pool2 = self.spec.pool2;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for item in stage.items.iter_mut() {
                h = match item {
                    StageItem::Residual(b) => b.forward(tape, ctx, h)?,
                    StageItem::NonLocal(nl) => nl.forward(tape, ctx, h)?,
                };
            }
            ctx.capture(format!("{}.out", stage.name), h);
            if si == 0 {
                if let Some(p2) = pool2 {
                    h = tape.max_pool3d(h, p2)?;
                }
            }
        }
        h = tape.global_avg_pool(h)?;
        if let RunMode::Train { dropout, .. } = ctx.mode {
            if dropout > 0.0 {
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::config("train-mode forward needs a dropout rng"))?;
                h = tape.dropout(h, dropout, rng)?;
            }
        }
        let logits = self.head.forward(tape, ctx, h)?;
        ctx.capture("logits", logits);
        Ok(logits)
    }

    /// Evaluation-mode forward on a plain tensor.
    pub fn forward_eval(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone())?;
        let mut ctx = ForwardCtx::eval();
        let logits = self.forward(&mut tape, &mut ctx, xid)?;
        Ok(tape.value(logits).clone())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        for stage in &self.stages {
            for item in &stage.items {
                match item {
                    StageItem::Residual(b) => b.visit(f),
                    StageItem::NonLocal(nl) => nl.params.visit(&nl.name, f),
                }
            }
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        for stage in &mut self.stages {
            for item in stage.items.iter_mut() {
                match item {
                    StageItem::Residual(b) => b.visit_mut(f),
                    StageItem::NonLocal(nl) => {
                        let name = nl.name.clone();
                        nl.params.visit_mut(&name, f)
                    }
                }
            }
        }
        self.head.visit_mut(f);
    }

    /// Total trainable parameter elements.
    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    /// The non-local layer with the given name, if any.
    pub fn nonlocal_layer(&self, name: &str) -> Option<&NonLocalLayer<T>> {
        self.stages.iter().flat_map(|s| &s.items).find_map(|item| match item {
            StageItem::NonLocal(nl) if nl.name == name => Some(nl),
            _ => None,
        })
    }

    pub fn nonlocal_names(&self) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| &s.items)
            .filter_map(|item| match item {
                StageItem::NonLocal(nl) => Some(nl.name.clone()),
                _ => None,
            })
            .collect()
    }
}

// ── Inflation ───────────────────────────────────────────────────────────

/// Inflate a 2D kernel [1,kh,kw,ci,co] to t temporal planes. Planes carry the
/// 2D weights rescaled by 1/t, with the last plane adjusted by the division
/// remainder so the planes sum to the source kernel exactly (left-to-right).
pub fn inflate_kernel<T: Scalar>(w2d: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let d = w2d.dims().to_vec();
    if d.len() != 5 || d[0] != 1 {
        return Err(Error::shape("inflate", format!("want a [1,kh,kw,ci,co] kernel, got {}", w2d.shape())));
    }
    if t == 0 {
        return Err(Error::config("inflation depth must be >= 1"));
    }
    let plane = w2d.numel();
    let inv_t = T::one() / T::lit(t as f64);
    let mut data = vec![T::zero(); t * plane];
    for (i, &w) in w2d.data().iter().enumerate() {
        let a = w * inv_t;
        let mut partial = T::zero();
        for p in 0..t - 1 {
            data[p * plane + i] = a;
            partial += a;
        }
        data[(t - 1) * plane + i] = w - partial;
    }
    Tensor::from_vec(vec![t, d[1], d[2], d[3], d[4]], data)
}

/// Turn a C2D network into an I3D one by kernel inflation. The stem becomes
/// t=5; within each stage, the chosen kernel of every other residual block
/// becomes t=3. Batch norm state and all other weights carry over unchanged.
pub fn inflate<T: Scalar>(net: &Network<T>, variant: Inflation) -> Result<Network<T>> {
    if net.spec.inflation != Inflation::None {
        return Err(Error::config("network is already inflated"));
    }
    if variant == Inflation::None {
        return Err(Error::config("inflation variant must be i3d_3x3x3 or i3d_3x1x1"));
    }
    let mut out = net.clone();
    out.spec.inflation = variant;
    let time_pad = out.spec.time_pad;

    out.spec.conv1_kernel = [5, net.spec.conv1_kernel[1], net.spec.conv1_kernel[2]];
    out.conv1.weight = inflate_kernel(&net.conv1.weight, 5)?;
    out.conv1.spec.pad[0] = 2;
    out.conv1.spec.time_pad = time_pad;

    for stage in out.stages.iter_mut() {
        let mut res_idx = 0;
        for item in stage.items.iter_mut() {
            let StageItem::Residual(block) = item else {
                continue;
            };
            if res_idx % 2 == 0 {
                match variant {
                    Inflation::I3d3x3x3 => {
                        block.conv2.weight = inflate_kernel(&block.conv2.weight, 3)?;
                        block.conv2.spec.pad[0] = 1;
                        block.conv2.spec.time_pad = time_pad;
                    }
                    Inflation::I3d3x1x1 => {
                        block.conv1.weight = inflate_kernel(&block.conv1.weight, 3)?;
                        block.conv1.spec.pad[0] = 1;
                        block.conv1.spec.time_pad = time_pad;
                    }
                    Inflation::None => unreachable!(),
                }
            }
            res_idx += 1;
        }
    }
    Ok(out)
}

// ── Non-local insertion ─────────────────────────────────────────────────

/// Where to put non-local blocks. The named policies reproduce the reference
/// placements at full scale: one block right before the last res4 block;
/// five = every other residual block of res3 and res4 (2 + 3 at full scale);
/// ten = every residual block of res3 and res4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertPolicy {
    One,
    Five,
    Ten,
    /// Explicit (stage number 2..=5, block index) pairs.
    Explicit(Vec<(usize, usize)>),
}

impl InsertPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(InsertPolicy::One),
            "five" => Ok(InsertPolicy::Five),
            "ten" => Ok(InsertPolicy::Ten),
            other => Err(Error::config(format!(
                "unknown insertion policy '{other}' (want one|five|ten)"
            ))),
        }
    }
}

/// Resolve a policy to concrete (stage, block) points for a spec.
pub fn insertion_points(spec: &NetworkSpec, policy: &InsertPolicy) -> Result<Vec<(usize, usize)>> {
    let points = match policy {
        InsertPolicy::One => {
            let res4 = spec.stage_by_number(4)?;
            vec![(4, res4.num_blocks - 1)]
        }
        InsertPolicy::Five => {
            let mut pts = Vec::new();
            for stage_no in [3, 4] {
                let st = spec.stage_by_number(stage_no)?;
                for b in (0..st.num_blocks).step_by(2) {
                    pts.push((stage_no, b));
                }
            }
            pts
        }
        InsertPolicy::Ten => {
            let mut pts = Vec::new();
            for stage_no in [3, 4] {
                let st = spec.stage_by_number(stage_no)?;
                for b in 0..st.num_blocks {
                    pts.push((stage_no, b));
                }
            }
            pts
        }
        InsertPolicy::Explicit(pts) => pts.clone(),
    };
    Ok(points)
}

/// Insert freshly initialized (identity) non-local blocks into a built
/// network. The host parameters are untouched; the block parameters are
/// drawn from their own seeded stream.
pub fn insert_nonlocal<T: Scalar>(
    net: &Network<T>,
    policy: &InsertPolicy,
    settings: &NonLocalSettings,
    seed: u64,
) -> Result<Network<T>> {
    let points = insertion_points(&net.spec, policy)?;
    let mut out = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = points.clone();
    sorted.sort_unstable();
    for &(stage_no, block_idx) in &sorted {
        let st = net.spec.stage_by_number(stage_no)?;
        if block_idx >= st.num_blocks {
            return Err(Error::config(format!(
                "insertion point {}[{}] out of range ({} blocks)",
                st.name, block_idx, st.num_blocks
            )));
        }
        if net
            .spec
            .nonlocal
            .iter()
            .any(|i| i.stage == stage_no && i.block == block_idx)
        {
            return Err(Error::config(format!(
                "stage res{stage_no} block {block_idx} already has a non-local block"
            )));
        }
        // find the stage item position of residual block `block_idx`
        let stage = &mut out.stages[stage_no - 2];
        let mut res_seen = 0;
        let mut insert_at = stage.items.len();
        for (pos, item) in stage.items.iter().enumerate() {
            if let StageItem::Residual(_) = item {
                if res_seen == block_idx {
                    insert_at = pos;
                    break;
                }
                res_seen += 1;
            }
        }
        // channel width entering that residual block
        let channels = block_input_channels(&net.spec, stage_no, block_idx);
        let layer = make_nonlocal_layer(&st.name, block_idx, channels, settings, &mut rng)?;
        stage.items.insert(insert_at, StageItem::NonLocal(layer));
        out.spec.nonlocal.push(NonLocalInsertion {
            stage: stage_no,
            block: block_idx,
            settings: *settings,
        });
    }
    Ok(out)
}

fn block_input_channels(spec: &NetworkSpec, stage_no: usize, block_idx: usize) -> usize {
    if block_idx > 0 {
        return spec.stages[stage_no - 2].out_channels;
    }
    if stage_no == 2 {
        spec.conv1_channels
    } else {
        spec.stages[stage_no - 3].out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ForwardCtx;

    fn rng(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    fn desk_input(seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(vec![1, 8, 32, 32, 1], -1.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        let spec = NetworkSpec::desk(1, 2);
        let a: Network<f64> = build_network(&spec, 1.0, 1.0, 7).unwrap();
        let b: Network<f64> = build_network(&spec, 1.0, 1.0, 7).unwrap();
        let mut all_eq = true;
        a.visit(&mut |name, t, _| {
            let mut found = false;
            b.visit(&mut |n2, t2, _| {
                if n2 == name {
                    found = true;
                    all_eq &= t.bit_eq(t2);
                }
            });
            assert!(found, "missing {name}");
        });
        assert!(all_eq);
    }

    #[test]
    fn forward_produces_logits() {
        let spec = NetworkSpec::desk(1, 2);
        let mut net: Network<f64> = build_network(&spec, 1.0, 1.0, 7).unwrap();
        let logits = net.forward_eval(&desk_input(1)).unwrap();
        assert_eq!(logits.dims(), &[1, 2]);
    }

    #[test]
    fn insertion_preserves_outputs_exactly() {
        let spec = NetworkSpec::desk(1, 2);
        let mut net: Network<f64> = build_network(&spec, 1.0, 1.0, 7).unwrap();
        let x = desk_input(2);
        let base = net.forward_eval(&x).unwrap();
        for policy in [InsertPolicy::One, InsertPolicy::Five, InsertPolicy::Ten] {
            let mut with_nl = insert_nonlocal(&net, &policy, &NonLocalSettings::default(), 99).unwrap();
            let out = with_nl.forward_eval(&x).unwrap();
            assert!(
                base.data().iter().zip(out.data()).all(|(&a, &b)| a == b),
                "identity insertion violated for {policy:?}"
            );
        }
    }

    #[test]
    fn policy_counts_at_full_scale() {
        let spec = NetworkSpec::full_scale(3, 400);
        assert_eq!(insertion_points(&spec, &InsertPolicy::One).unwrap(), vec![(4, 5)]);
        let five = insertion_points(&spec, &InsertPolicy::Five).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(five.iter().filter(|(s, _)| *s == 3).count(), 2);
        assert_eq!(five.iter().filter(|(s, _)| *s == 4).count(), 3);
        let ten = insertion_points(&spec, &InsertPolicy::Ten).unwrap();
        assert_eq!(ten.len(), 10);
    }

    #[test]
    fn inflated_planes_sum_to_source_exactly() {
        let w = Tensor::<f64>::randn(vec![1, 3, 3, 4, 8], 0.7, &mut rng(5));
        for t in [2, 3, 5] {
            let w3 = inflate_kernel(&w, t).unwrap();
            let plane = w.numel();
            for i in 0..plane {
                let mut sum = 0.0;
                for p in 0..t {
                    sum += w3.data()[p * plane + i];
                }
                assert_eq!(sum.to_bits(), w.data()[i].to_bits(), "plane sum mismatch at {i} t={t}");
            }
        }
    }

    #[test]
    fn inflate_t1_is_numerically_unchanged() {
        let w = Tensor::<f64>::randn(vec![1, 3, 3, 2, 2], 0.5, &mut rng(6));
        let w1 = inflate_kernel(&w, 1).unwrap();
        assert!(w1.bit_eq(&w));
    }

    #[test]
    fn double_inflation_is_rejected() {
        let spec = NetworkSpec::desk(1, 2);
        let net: Network<f64> = build_network(&spec, 1.0, 1.0, 7).unwrap();
        let i3d = inflate(&net, Inflation::I3d3x3x3).unwrap();
        assert!(inflate(&i3d, Inflation::I3d3x1x1).is_err());
    }

    #[test]
    fn static_clip_matches_single_frame_with_replicate_padding() {
        let mut spec = NetworkSpec::desk(1, 2);
        spec.time_pad = TimePad::Replicate;
        let net: Network<f64> = build_network(&spec, 1.0, 1.0, 11).unwrap();
        let frame = Tensor::<f64>::rand_uniform(vec![1, 1, 32, 32, 1], -1.0, 1.0, &mut rng(12));
        // repeat the frame 8 times
        let mut clip = Tensor::zeros(vec![1, 8, 32, 32, 1]);
        for t in 0..8 {
            let n = 32 * 32;
            clip.data_mut()[t * n..(t + 1) * n].copy_from_slice(frame.data());
        }
        for variant in [Inflation::I3d3x3x3, Inflation::I3d3x1x1] {
            let mut i3d = inflate(&net, variant).unwrap();
            let mut c2d = net.clone();
            let logits_3d = i3d.forward_eval(&clip).unwrap();
            let logits_2d = c2d.forward_eval(&frame).unwrap();
            let diff = logits_3d.max_abs_diff(&logits_2d);
            assert!(diff <= 1e-6, "static equivalence {variant:?}: {diff}");
        }
    }

    #[test]
    fn interior_frames_match_bitwise_between_padding_modes() {
        // On a static clip, zero and replicate temporal padding agree exactly
        // wherever the kernel window stays in range.
        let mut spec_rep = NetworkSpec::desk(1, 2);
        spec_rep.time_pad = TimePad::Replicate;
        let net_rep: Network<f64> = build_network(&spec_rep, 1.0, 1.0, 11).unwrap();
        let i3d_rep = inflate(&net_rep, Inflation::I3d3x3x3).unwrap();
        let mut i3d_zero = i3d_rep.clone();
        i3d_zero.spec.time_pad = TimePad::Zero;
        i3d_zero.conv1.spec.time_pad = TimePad::Zero;
        for stage in i3d_zero.stages.iter_mut() {
            for item in stage.items.iter_mut() {
                if let StageItem::Residual(b) = item {
                    b.conv1.spec.time_pad = TimePad::Zero;
                    b.conv2.spec.time_pad = TimePad::Zero;
                    b.conv3.spec.time_pad = TimePad::Zero;
                }
            }
        }
        let frame = Tensor::<f64>::rand_uniform(vec![1, 1, 32, 32, 1], -1.0, 1.0, &mut rng(13));
        let mut clip = Tensor::zeros(vec![1, 8, 32, 32, 1]);
        for t in 0..8 {
            let n = 32 * 32;
            clip.data_mut()[t * n..(t + 1) * n].copy_from_slice(frame.data());
        }
        let run = |net: &mut Network<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(clip.clone()).unwrap();
            let mut ctx = ForwardCtx::eval();
            net.forward(&mut tape, &mut ctx, xid).unwrap();
            let tap = ctx.captured("conv1.out").unwrap();
            tape.value(tap).clone()
        };
        let (a, b) = (run(&mut i3d_rep.clone()), run(&mut i3d_zero));
        // conv1 is 5x7x7 with temporal pad 2: frames 2..T-2 are interior
        let d = a.dims().to_vec();
        let frame_elems = d[2] * d[3] * d[4];
        for t in 2..d[1] - 2 {
            let lo = t * frame_elems;
            let hi = lo + frame_elems;
            assert_eq!(
                a.data()[lo..hi]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                b.data()[lo..hi]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                "interior frame {t} differs between padding modes"
            );
        }
    }
}
