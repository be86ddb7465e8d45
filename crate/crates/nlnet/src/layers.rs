//! Parameterized layer primitives shared by the non-local block and the
//! backbones: 3D convolution, batch norm, and the linear head.
//!
//! Parameters live in the layers; each forward pass binds them onto the tape
//! as leaves and records (name, id) pairs so the training loop can route
//! gradients back by name-free positional lookup.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, Tape, TensorId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Whether a visited tensor is optimized by SGD or is auxiliary state
/// (batch-norm running statistics). Both are checkpointed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

/// Execution mode for a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum RunMode {
    Eval,
    Train { dropout: f64, bn_frozen: bool },
}

impl RunMode {
    pub fn is_train(&self) -> bool {
        matches!(self, RunMode::Train { .. })
    }

    pub fn uses_batch_stats(&self) -> bool {
        matches!(self, RunMode::Train { bn_frozen: false, .. })
    }
}

/// Per-forward state threaded through the layers.
pub struct ForwardCtx<'a> {
    pub mode: RunMode,
    /// Dropout stream; required when mode is Train with a nonzero rate.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// (parameter name, leaf id) in visit order.
    pub binds: Vec<(String, TensorId)>,
    /// Tapped intermediates by name (conv1.out, res3.out, affinity ids, ...).
    pub captures: Vec<(String, TensorId)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: RunMode::Eval,
            rng: None,
            binds: Vec::new(),
            captures: Vec::new(),
        }
    }

    pub fn train(dropout: f64, bn_frozen: bool, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: RunMode::Train { dropout, bn_frozen },
            rng: Some(rng),
            binds: Vec::new(),
            captures: Vec::new(),
        }
    }

    pub fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, name: &str, t: &Tensor<T>) -> Result<TensorId> {
        let id = tape.leaf(t.clone())?;
        self.binds.push((name.to_string(), id));
        Ok(id)
    }

    pub fn capture(&mut self, name: impl Into<String>, id: TensorId) {
        self.captures.push((name.into(), id));
    }

    pub fn captured(&self, name: &str) -> Option<TensorId> {
        self.captures
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }
}

/// He initialization: zero-mean normal with std sqrt(2 / fan_in).
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Bias-free 3D convolution layer (batch norm follows every conv here).
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub name: String,
    /// [kt, kh, kw, Cin, Cout]
    pub weight: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        name: impl Into<String>,
        kernel: [usize; 3],
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel[0] * kernel[1] * kernel[2] * cin;
        ConvLayer {
            name: name.into(),
            weight: Tensor::randn(
                vec![kernel[0], kernel[1], kernel[2], cin, cout],
                he_std(fan_in),
                rng,
            ),
            spec,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>, x: TensorId) -> Result<TensorId> {
        let w = ctx.bind(tape, &format!("{}.weight", self.name), &self.weight)?;
        tape.conv3d(x, w, self.spec)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Trainable);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Trainable);
    }
}

/// Per-channel batch normalization over all leading dims, channels last.
/// Running statistics follow m <- momentum*m + (1-momentum)*batch.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    /// Fresh statistics (mean 0, var 1); `gamma_init` is 1 for ordinary
    /// layers and 0 for the non-local output projection.
    pub fn new(name: impl Into<String>, channels: usize, gamma_init: f64) -> Self {
        BatchNorm {
            name: name.into(),
            gamma: Tensor::full(vec![channels], T::lit(gamma_init)),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<'_>,
        x: TensorId,
    ) -> Result<TensorId> {
        let g = ctx.bind(tape, &format!("{}.gamma", self.name), &self.gamma)?;
        let b = ctx.bind(tape, &format!("{}.beta", self.name), &self.beta)?;
        if ctx.mode.uses_batch_stats() {
            let (y, mean, var) = tape.batch_norm_train(x, g, b, self.eps)?;
            self.fold_running(&mean, &var);
            Ok(y)
        } else {
            tape.batch_norm_eval(
                x,
                g,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            )
        }
    }

    pub fn fold_running(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(self.momentum);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = *r * m + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = *r * m + one_m * b;
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &self.gamma, ParamKind::Trainable);
        f(&format!("{}.beta", self.name), &self.beta, ParamKind::Trainable);
        f(&format!("{}.running_mean", self.name), &self.running_mean, ParamKind::State);
        f(&format!("{}.running_var", self.name), &self.running_var, ParamKind::State);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, ParamKind::Trainable);
        f(&format!("{}.beta", self.name), &mut self.beta, ParamKind::Trainable);
        f(&format!("{}.running_mean", self.name), &mut self.running_mean, ParamKind::State);
        f(&format!("{}.running_var", self.name), &mut self.running_var, ParamKind::State);
    }
}

/// Fully connected classifier head layer.
#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub name: String,
    /// [D, K]
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: impl Into<String>, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            name: name.into(),
            weight: Tensor::randn(vec![d, k], he_std(d), rng),
            bias: Tensor::zeros(vec![k]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>, x: TensorId) -> Result<TensorId> {
        let w = ctx.bind(tape, &format!("{}.weight", self.name), &self.weight)?;
        let b = ctx.bind(tape, &format!("{}.bias", self.name), &self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Trainable);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Trainable);
    }
}
