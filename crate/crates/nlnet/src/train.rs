//! Seeded SGD training with momentum, weight decay, and a step learning-rate
//! schedule, plus multi-clip evaluation.

use crate::backbone::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, ParamKind};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate drops by 10x. Sorted ascending.
    pub decay_iters: Vec<usize>,
    pub dropout: f64,
    /// Freeze batch norm (use running statistics) during training.
    pub bn_frozen: bool,
    /// Validation cadence in iterations.
    pub eval_every: usize,
    pub clips_per_item: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The desk schedule: the reference recipe's shape (LR 0.01, x0.1 steps,
    /// momentum 0.9, weight decay 1e-4, dropout 0.5) at 5k iterations.
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_iters: vec![3000, 4500],
            dropout: 0.5,
            bn_frozen: false,
            eval_every: 500,
            clips_per_item: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch size must be positive"));
        }
        if !self.decay_iters.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("decay marks must be sorted ascending"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if self.clips_per_item == 0 {
            return Err(Error::config("clips_per_item must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        Ok(())
    }

    /// Effective learning rate: initial * 0.1^(number of passed marks).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let passed = self.decay_iters.iter().filter(|&&m| iter >= m).count();
        self.lr * 0.1f64.powi(passed as i32)
    }
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Top-1 on the current training batch.
    pub train_top1: f64,
    /// Most recently evaluated validation top-1.
    pub val_top1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub rows: Vec<MetricsRow>,
    pub final_train_top1: f64,
    pub final_val_top1: f64,
}

/// Plain SGD with momentum and (coupled) weight decay:
/// v <- mu*v + (g + wd*theta); theta <- theta - lr*v.
struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    fn new(net: &Network<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = Vec::new();
        net.visit(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                velocity.push(vec![T::zero(); t.numel()]);
            }
        });
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    fn step(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        let lr = T::lit(lr);
        let mut idx = 0;
        let mut missing: Option<String> = None;
        net.visit_mut(&mut |name, t, kind| {
            if kind != ParamKind::Trainable || missing.is_some() {
                return;
            }
            let v = &mut self.velocity[idx];
            idx += 1;
            let Some(grad) = t.grad() else {
                missing = Some(name.to_string());
                return;
            };
            let grad = grad.to_vec();
            for ((th, vel), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + (g + wd * *th);
                *th = *th - lr * *vel;
            }
            t.clear_grad();
        });
        match missing {
            Some(name) => Err(Error::Numeric(format!("no gradient for parameter {name}"))),
            None => Ok(()),
        }
    }
}

/// Copy tape gradients into the named parameters' grad buffers.
fn route_grads<T: Scalar>(
    net: &mut Network<T>,
    tape: &Tape<T>,
    binds: &[(String, crate::tape::TensorId)],
) -> Result<()> {
    let mut by_name: HashMap<&str, &[T]> = HashMap::new();
    for (name, id) in binds {
        if let Some(g) = tape.grad(*id) {
            by_name.insert(name.as_str(), g);
        }
    }
    let mut missing: Option<String> = None;
    net.visit_mut(&mut |name, t, kind| {
        if kind != ParamKind::Trainable || missing.is_some() {
            return;
        }
        match by_name.get(name) {
            Some(g) => t.set_grad(g.to_vec()),
            None => missing = Some(name.to_string()),
        }
    });
    match missing {
        Some(name) => Err(Error::Numeric(format!(
            "parameter {name} was not bound in the forward pass"
        ))),
        None => Ok(()),
    }
}

fn stack_clips<T: Scalar>(clips: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let dims = clips[0].dims().to_vec();
    let mut data = Vec::with_capacity(clips.len() * clips[0].numel());
    for c in clips {
        if c.dims() != dims {
            return Err(Error::shape("stack", "ragged clip shapes"));
        }
        data.extend_from_slice(c.data());
    }
    let mut shape = vec![clips.len()];
    shape.extend(dims);
    Tensor::from_vec(shape, data)
}

fn batch_top1<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Train in place. Deterministic under a fixed seed and single-threaded
/// execution; a NaN loss aborts with the offending iteration index.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_data: &Dataset<T>,
    val_data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_with(net, train_data, val_data, cfg, &mut |_| {})
}

/// [`train`] with a per-row sink, so callers can persist metrics as they are
/// produced (partial logs survive a divergence abort).
pub fn train_with<T: Scalar>(
    net: &mut Network<T>,
    train_data: &Dataset<T>,
    val_data: &Dataset<T>,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let mut rng_data = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let mut rng_dropout = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2));
    let mut sgd = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    order.shuffle(&mut rng_data);
    let mut cursor = 0usize;

    let mut val_top1 = evaluate(net, val_data, cfg.clips_per_item)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut last_train_top1 = 0.0;

    for iter in 0..cfg.iterations {
        // assemble the batch
        let mut idxs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng_data);
                cursor = 0;
            }
            idxs.push(order[cursor]);
            cursor += 1;
        }
        let clips: Vec<&Tensor<T>> = idxs.iter().map(|&i| &train_data.clips[i]).collect();
        let labels: Vec<usize> = idxs.iter().map(|&i| train_data.labels[i]).collect();
        let batch = stack_clips(&clips)?;

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(cfg.dropout, cfg.bn_frozen, &mut rng_dropout);
        let step = (|| -> Result<(f64, f64)> {
            let x = tape.leaf(batch)?;
            let logits = net.forward(&mut tape, &mut ctx, x)?;
            let top1 = batch_top1(tape.value(logits), &labels);
            let loss_id = tape.cross_entropy(logits, &labels)?;
            let loss = tape.value(loss_id).data()[0].to_f64_lossy();
            tape.backward(loss_id)?;
            Ok((loss, top1))
        })();
        let (loss, top1) = step.map_err(|e| match e {
            Error::NonFinite { op } => {
                Error::Numeric(format!("training diverged at iteration {iter} (non-finite {op})"))
            }
            other => other,
        })?;
        last_train_top1 = top1;
        route_grads(net, &tape, &ctx.binds)?;
        sgd.step(net, cfg.lr_at(iter))?;

        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations {
            val_top1 = evaluate(net, val_data, cfg.clips_per_item)?;
        }
        let row = MetricsRow {
            iter,
            lr: cfg.lr_at(iter),
            loss,
            train_top1: top1,
            val_top1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(TrainResult {
        rows,
        final_train_top1: last_train_top1,
        final_val_top1: val_top1,
    })
}

/// Top-1 accuracy with multi-clip softmax averaging: each item contributes
/// `clips_per_item` temporal windows sampled evenly (identical windows when
/// the item is no longer than the network input), and the per-item
/// prediction is the argmax of the mean softmax vector.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    clips_per_item: usize,
) -> Result<f64> {
    if clips_per_item == 0 {
        return Err(Error::config("clips_per_item must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let t_item = data.clips[0].dims()[0];
    let mut correct = 0usize;
    const EVAL_BATCH: usize = 16;
    for (chunk_idx, chunk) in data.clips.chunks(EVAL_BATCH).enumerate() {
        let labels = &data.labels[chunk_idx * EVAL_BATCH..chunk_idx * EVAL_BATCH + chunk.len()];
        // evenly spaced window starts; identical items need one forward pass
        let starts = window_starts(t_item, t_item, clips_per_item);
        let mut mean_probs: Vec<Vec<f64>> = Vec::new();
        let mut distinct = starts.clone();
        distinct.dedup();
        for &start in &distinct {
            let weight = starts.iter().filter(|&&s| s == start).count() as f64;
            let views: Vec<Tensor<T>> = chunk.iter().map(|c| window(c, start, t_item)).collect();
            let refs: Vec<&Tensor<T>> = views.iter().collect();
            let batch = stack_clips(&refs)?;
            let logits = net.forward_eval(&batch)?;
            let k = logits.dims()[1];
            if mean_probs.is_empty() {
                mean_probs = vec![vec![0.0; k]; chunk.len()];
            }
            for i in 0..chunk.len() {
                let row = &logits.data()[i * k..(i + 1) * k];
                let probs = softmax_f64(row);
                for (m, p) in mean_probs[i].iter_mut().zip(probs) {
                    *m += weight * p;
                }
            }
        }
        for (probs, &label) in mean_probs.iter().zip(labels) {
            let mut best = 0;
            for j in 1..probs.len() {
                if probs[j] > probs[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn window_starts(t_item: usize, t_net: usize, clips: usize) -> Vec<usize> {
    if t_item <= t_net || clips == 1 {
        let start = (t_item - t_net.min(t_item)) / 2;
        return vec![start; clips];
    }
    let span = t_item - t_net;
    (0..clips)
        .map(|i| (i * span + (clips - 1) / 2) / (clips - 1).max(1))
        .collect()
}

fn window<T: Scalar>(clip: &Tensor<T>, start: usize, t_net: usize) -> Tensor<T> {
    let d = clip.dims();
    if start == 0 && t_net == d[0] {
        return clip.clone();
    }
    let frame = d[1] * d[2] * d[3];
    let data = clip.data()[start * frame..(start + t_net) * frame].to_vec();
    Tensor::from_vec(vec![t_net, d[1], d[2], d[3]], data).expect("window shape")
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let mx = row
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_network, NetworkSpec};
    use crate::data::{generate, Split, SyntheticTask};

    fn micro_setup() -> (Network<f64>, Dataset<f64>, Dataset<f64>) {
        let spec = NetworkSpec::micro(1, 2);
        let net = build_network(&spec, 1.0, 1.0, 3).unwrap();
        let task = SyntheticTask::delayed_match(4, 16, 16, 0.0, 7);
        let train: Dataset<f64> = generate(&task, 16, Split::Train).unwrap();
        let val: Dataset<f64> = generate(&task, 8, Split::Val).unwrap();
        (net, train, val)
    }

    #[test]
    fn lr_schedule_is_exact_powers_of_ten() {
        let cfg = TrainConfig {
            lr: 0.01,
            decay_iters: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(9), 0.01);
        assert_eq!(cfg.lr_at(10), 0.01 * 0.1f64.powi(1));
        assert_eq!(cfg.lr_at(19), 0.01 * 0.1f64.powi(1));
        assert_eq!(cfg.lr_at(20), 0.01 * 0.1f64.powi(2));
    }

    #[test]
    fn unsorted_decay_marks_are_rejected() {
        let cfg = TrainConfig {
            decay_iters: vec![20, 10],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (mut net, train_data, val_data) = micro_setup();
        let before: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            net.visit(&mut |_, t, _| v.push(t.data().to_vec()));
            v
        };
        let acc_before = evaluate(&mut net, &val_data, 1).unwrap();
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 4,
            lr: 0.0,
            bn_frozen: true, // keep running stats fixed too
            dropout: 0.0,
            eval_every: 5,
            ..TrainConfig::default()
        };
        train(&mut net, &train_data, &val_data, &cfg).unwrap();
        let mut i = 0;
        net.visit(&mut |name, t, _| {
            assert_eq!(t.data(), before[i].as_slice(), "{name} changed");
            i += 1;
        });
        let acc_after = evaluate(&mut net, &val_data, 1).unwrap();
        assert_eq!(acc_before, acc_after);
    }

    #[test]
    fn weight_decay_shrinks_params_exactly_without_gradients() {
        // zero gradient comes from a loss that ignores the probed parameter:
        // emulate by a direct SGD step with zero grads
        let (mut net, _, _) = micro_setup();
        let lr = 0.5;
        let wd = 1e-4;
        let mut expected: Vec<Vec<f64>> = Vec::new();
        net.visit(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                expected.push(t.data().iter().map(|&x| x - lr * (wd * x)).collect());
            }
        });
        net.visit_mut(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                let n = t.numel();
                t.set_grad(vec![0.0; n]);
            }
        });
        let mut sgd = Sgd::new(&net, 0.0, wd);
        sgd.step(&mut net, lr).unwrap();
        let mut i = 0;
        net.visit(&mut |name, t, kind| {
            if kind == ParamKind::Trainable {
                assert_eq!(t.data(), expected[i].as_slice(), "{name}");
                i += 1;
            }
        });
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let (mut net, train_data, val_data) = micro_setup();
            let cfg = TrainConfig {
                iterations: 8,
                batch_size: 4,
                eval_every: 4,
                seed: 5,
                ..TrainConfig::default()
            };
            train(&mut net, &train_data, &val_data, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.val_top1.to_bits(), rb.val_top1.to_bits());
        }
    }

    #[test]
    fn linear_model_fits_separable_data() {
        // one-layer model on linearly separable toy data: a micro net is
        // overkill here, so check the optimizer on a bare linear head via a
        // direct tape loop
        use crate::tape::Tape;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 64;
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            // class 0 at (-1,-1)+noise, class 1 at (1,1)+noise
            let cx = if y == 1 { 1.0 } else { -1.0 };
            xs.push([
                cx + 0.2 * (rand::Rng::random::<f64>(&mut rng) - 0.5),
                cx + 0.2 * (rand::Rng::random::<f64>(&mut rng) - 0.5),
            ]);
            labels.push(y);
        }
        let mut w = Tensor::<f64>::zeros(vec![2, 2]);
        let mut b = Tensor::<f64>::zeros(vec![2]);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let flat: Vec<f64> = xs.iter().flat_map(|p| p.iter().copied()).collect();
            let x = tape.leaf(Tensor::from_vec(vec![n, 2], flat).unwrap()).unwrap();
            let wid = tape.leaf(w.clone()).unwrap();
            let bid = tape.leaf(b.clone()).unwrap();
            let xw = tape.matmul(x, wid).unwrap();
            let logits = tape.add_bias(xw, bid).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            for (p, g) in w.data_mut().iter_mut().zip(tape.grad(wid).unwrap()) {
                *p -= 0.5 * g;
            }
            for (p, g) in b.data_mut().iter_mut().zip(tape.grad(bid).unwrap()) {
                *p -= 0.5 * g;
            }
        }
        // train accuracy
        let mut correct = 0;
        for (p, &y) in xs.iter().zip(&labels) {
            let s0 = p[0] * w.data()[0] + p[1] * w.data()[2] + b.data()[0];
            let s1 = p[0] * w.data()[1] + p[1] * w.data()[3] + b.data()[1];
            if usize::from(s1 > s0) == y {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 >= 0.99);
    }

    #[test]
    fn duplicated_clips_do_not_change_accuracy() {
        let (mut net, _, val_data) = micro_setup();
        let one = evaluate(&mut net, &val_data, 1).unwrap();
        let ten = evaluate(&mut net, &val_data, 10).unwrap();
        assert_eq!(one, ten);
    }

    #[test]
    fn diverged_loss_reports_iteration() {
        let (mut net, train_data, val_data) = micro_setup();
        // a catastrophically large LR blows the loss up to NaN/Inf quickly
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 4,
            lr: 1e18,
            eval_every: 1000,
            ..TrainConfig::default()
        };
        let err = train(&mut net, &train_data, &val_data, &cfg);
        match err {
            Err(Error::Numeric(msg)) => assert!(msg.contains("iteration"), "{msg}"),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }
}
