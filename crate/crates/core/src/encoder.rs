//! Multilayer perceptron encoder with hand-written forward/backward passes.
//!
//! Hidden layers use a rectifier; the last linear layer feeds a unit-norm
//! projection, so every embedding lies on the sphere. Parameters are trained
//! with momentum SGD under a per-epoch warmup + cosine schedule.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{shape_err, Result, SecuError};
use crate::numerics::{axpy_unchecked, dot, normalize_in_place, Mat};

/// One affine layer, `out = weight · in + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMlp {
    dims: Vec<usize>,
    layers: Vec<Linear>,
    momentum: Vec<Linear>,
    // bumped on every parameter change so stale tapes can be detected
    generation: u64,
}

/// Intermediate values recorded by [`EncoderMlp::forward`].
#[derive(Debug, Clone)]
pub struct ActivationTape {
    generation: u64,
    /// Input to each layer (`inputs[0]` is the raw input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Vec<f64>>,
    output_norm: f64,
    embedding: Vec<f64>,
}

impl ActivationTape {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

/// Gradients with the same layout as the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Linear>,
}

impl ParamGrads {
    pub fn zeros_for(enc: &EncoderMlp) -> Self {
        Self {
            layers: enc.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// All gradient entries in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }
}

impl EncoderMlp {
    /// Builds an encoder with layer widths `dims = [d_in, h_1, …, d_out]`.
    ///
    /// Weights are drawn from U(−√(6/fan_in), √(6/fan_in)); biases start at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(SecuError::Config(
                "encoder needs at least one layer (input and output widths)".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(SecuError::Config(
                "encoder layer widths must be positive".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Linear {
                    weight: Mat::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Wraps explicit layers; momentum buffers start at zero.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(SecuError::Config("encoder needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != *dims.last().unwrap() || l.bias.len() != l.weight.rows() {
                return shape_err(format!("layer {i} does not chain with its predecessor"));
            }
            dims.push(l.weight.rows());
        }
        let momentum = layers.iter().map(Linear::zeros_like).collect();
        Ok(Self {
            dims,
            layers,
            momentum,
            generation: 0,
        })
    }

    pub(crate) fn with_momentum(mut self, momentum: Vec<Linear>) -> Result<Self> {
        if momentum.len() != self.layers.len()
            || momentum.iter().zip(&self.layers).any(|(m, l)| {
                m.weight.rows() != l.weight.rows()
                    || m.weight.cols() != l.weight.cols()
                    || m.bias.len() != l.bias.len()
            })
        {
            return shape_err("momentum buffers do not match layer shapes");
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn momentum_buffers(&self) -> &[Linear] {
        &self.momentum
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Linear] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ActivationTape)> {
        if input.len() != self.input_dim() {
            return shape_err(format!(
                "encoder expects input width {}, got {}",
                self.input_dim(),
                input.len()
            ));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&current)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            inputs.push(current);
            if i < last {
                let a = z.iter().map(|v| v.max(0.0)).collect();
                pre_activations.push(z);
                current = a;
            } else {
                current = z;
            }
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(SecuError::NonFinite("encoder output"));
        }
        let output_norm = normalize_in_place(&mut current)?;
        let tape = ActivationTape {
            generation: self.generation,
            inputs,
            pre_activations,
            output_norm,
            embedding: current.clone(),
        };
        Ok((current, tape))
    }

    /// Embeds every row of `inputs`.
    pub fn forward_batch(&self, inputs: &Mat) -> Result<(Vec<Vec<f64>>, Vec<ActivationTape>)> {
        let mut embs = Vec::with_capacity(inputs.rows());
        let mut tapes = Vec::with_capacity(inputs.rows());
        for row in inputs.iter_rows() {
            let (e, t) = self.forward(row)?;
            embs.push(e);
            tapes.push(t);
        }
        Ok((embs, tapes))
    }

    /// Forward pass without keeping the tape.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(e, _)| e)
    }

    pub fn backward(&self, tape: &ActivationTape, grad_embedding: &[f64]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_for(self);
        self.backward_into(tape, grad_embedding, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale ·` the parameter gradient for one tape into `grads`.
    pub fn backward_into(
        &self,
        tape: &ActivationTape,
        grad_embedding: &[f64],
        scale: f64,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(SecuError::StaleTape);
        }
        if grad_embedding.len() != self.output_dim() {
            return shape_err(format!(
                "embedding gradient has width {}, expected {}",
                grad_embedding.len(),
                self.output_dim()
            ));
        }
        if grads.layers.len() != self.layers.len() {
            return shape_err("gradient buffer does not match encoder");
        }
        // through x / ‖x‖: (I − x̂x̂ᵀ) g / ‖x‖
        let x_hat = &tape.embedding;
        let proj = dot(x_hat, grad_embedding);
        let mut g: Vec<f64> = grad_embedding
            .iter()
            .zip(x_hat)
            .map(|(gi, xi)| scale * (gi - proj * xi) / tape.output_norm)
            .collect();

        for l in (0..self.layers.len()).rev() {
            let input = &tape.inputs[l];
            let gl = &mut grads.layers[l];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    axpy_unchecked(gr, input, gl.weight.row_mut(r));
                }
                gl.bias[r] += gr;
            }
            if l > 0 {
                let mut below = self.layers[l].weight.matvec_t(&g)?;
                for (b, z) in below.iter_mut().zip(&tape.pre_activations[l - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
                g = below;
            }
        }
        Ok(())
    }

    /// Momentum SGD: `buf ← momentum·buf + grad; param ← param − lr·buf`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(SecuError::InvalidArgument(format!(
                "sgd_step needs lr >= 0 and 0 <= momentum < 1 (got {lr}, {momentum})"
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| {
                g.weight.rows() != l.weight.rows()
                    || g.weight.cols() != l.weight.cols()
                    || g.bias.len() != l.bias.len()
            })
        {
            return shape_err("gradient shapes do not match encoder");
        }
        for ((layer, buf), g) in self
            .layers
            .iter_mut()
            .zip(&mut self.momentum)
            .zip(&grads.layers)
        {
            step_slice(
                layer.weight.as_mut_slice(),
                buf.weight.as_mut_slice(),
                g.weight.as_slice(),
                lr,
                momentum,
            );
            step_slice(&mut layer.bias, &mut buf.bias, &g.bias, lr, momentum);
        }
        self.generation += 1;
        Ok(())
    }

    /// All parameters in declaration order (weights then bias, layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Overwrites the parameter at flat index `idx` (see [`Self::flat_params`]).
    pub fn set_flat_param(&mut self, mut idx: usize, value: f64) {
        self.generation += 1;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if idx < nw {
                l.weight.as_mut_slice()[idx] = value;
                return;
            }
            idx -= nw;
            if idx < l.bias.len() {
                l.bias[idx] = value;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

fn step_slice(param: &mut [f64], buf: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, b), g) in param.iter_mut().zip(buf.iter_mut()).zip(grad) {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

/// Linear warmup followed by cosine decay, evaluated once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(SecuError::Config(format!(
                "base learning rate must be positive, got {base_lr}"
            )));
        }
        if warmup_epochs > total_epochs {
            return Err(SecuError::Config(format!(
                "warmup epochs ({warmup_epochs}) exceed total epochs ({total_epochs})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(SecuError::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let span = self.total_epochs - self.warmup_epochs;
        let progress = if span > 1 {
            (epoch - self.warmup_epochs) as f64 / (span - 1) as f64
        } else {
            0.0
        };
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
