//! A miniature encoder-decoder segmentation network ("mini-Unet").
//!
//! With `L` levels and widths `w[0..L]` the topology is
//!
//! ```text
//! e_l = relu(conv3(x_l))          x_{l+1} = maxpool2(e_l)        l = 0..L
//! b   = relu(conv3(x_L))          (width w[L-1])
//! d_l = relu(conv3(concat(up2(d_{l+1} or b), e_l)))              l = L-1..0
//! o   = conv1(d_0)                (C channels)
//! ```
//!
//! `L = 0` degenerates to a single 1×1 convolution, i.e. per-pixel
//! multinomial logistic regression. The final activation is a plain softmax
//! or the one-step regularized softmax during training, and the iterative
//! regularized softmax at prediction time.

mod checkpoint;
pub mod layers;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, read_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{cross_entropy, train, TrainConfig, TrainLog, DEFAULT_CLIP_NORM};

use crate::activation::{
    reg_softmax_iterative_value, reg_softmax_onestep, softmax, ProbField, RegActConfig, RegActTape,
};
use crate::backward::{lambda_gradient, reg_softmax_onestep_backward, softmax_jvp, update_lambda};
use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap, Shape};
use layers::{
    concat, max_pool2, max_pool2_backward, relu_backward, relu_in_place, split, upsample2,
    upsample2_backward, Conv2d, ConvGrad, ConvTape,
};

/// Which activation sits on top of the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    Plain,
    Regularized,
}

impl std::fmt::Display for FinalActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinalActivation::Plain => "plain",
            FinalActivation::Regularized => "regularized",
        })
    }
}

impl std::str::FromStr for FinalActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(FinalActivation::Plain),
            "regularized" => Ok(FinalActivation::Regularized),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_channels: usize,
    pub classes: usize,
    /// Channel width per encoder level; its length is the level count.
    pub widths: Vec<usize>,
    pub activation: FinalActivation,
    /// Regularized-activation settings. `lambda` is the trainable weight,
    /// `kappa` the training-time step, `tau` and `iterations` the
    /// prediction-time solver.
    pub reg: RegActConfig,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            input_channels: 3,
            classes: 3,
            widths: vec![16, 32],
            activation: FinalActivation::Plain,
            reg: RegActConfig {
                iterations: crate::activation::DEFAULT_TEST_ITERATIONS,
                ..RegActConfig::default()
            },
        }
    }
}

impl NetSpec {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input_channels == 0 {
            v.push("input channels must be positive".to_string());
        }
        if self.classes < 2 {
            v.push(format!("class count must be >= 2 (got {})", self.classes));
        }
        if self.classes > u8::MAX as usize + 1 {
            v.push(format!("class count must be <= 256 (got {})", self.classes));
        }
        if self.widths.contains(&0) {
            v.push("level widths must be positive".to_string());
        }
        v.extend(self.reg.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    /// `(in, out, kernel)` of every convolution in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = Vec::new();
        let w = &self.widths;
        let levels = w.len();
        if levels == 0 {
            dims.push((self.input_channels, self.classes, 1));
            return dims;
        }
        let mut cin = self.input_channels;
        for &width in w {
            dims.push((cin, width, 3));
            cin = width;
        }
        let top = w[levels - 1];
        dims.push((top, top, 3));
        let mut below = top;
        for l in (0..levels).rev() {
            dims.push((below + w[l], w[l], 3));
            below = w[l];
        }
        dims.push((w[0], self.classes, 1));
        dims
    }

    /// Rejects image sizes the pooling levels cannot halve exactly.
    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.levels();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::InvalidShape(format!(
                "image {height}x{width} is not divisible by {f} for {} pooling levels",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Convolution parameters plus SGD-momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Conv2d>,
    pub velocity: Vec<ConvGrad>,
    pub learning_rate: f64,
    pub momentum: f64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl ParamSet {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum()
    }

    /// Flattened parameters, weights then bias per layer in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidShape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// `v <- momentum * v + g`, `theta <- theta - lr * v`.
    pub fn sgd_momentum_step(&mut self, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidShape("gradient layer count mismatch".into()));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, vel), g) in self
            .layers
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grads.layers)
        {
            if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
                return Err(Error::InvalidShape("gradient shape mismatch".into()));
            }
            for ((p, v), gi) in layer
                .weights
                .iter_mut()
                .zip(&mut vel.weights)
                .zip(&g.weights)
            {
                *v = mu * *v + gi;
                *p -= lr * *v;
            }
            for ((p, v), gi) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = mu * *v + gi;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Parameter gradients, plus `dL/dlambda` when the activation is regularized.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvGrad>,
    pub lambda: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            layers: params.layers.iter().map(ConvGrad::zeros_like).collect(),
            lambda: 0.0,
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b);
        }
        self.lambda += alpha * other.lambda;
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    /// Euclidean norm over the layer gradients (not `lambda`).
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales the layer gradients down to norm `max` if they exceed it.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if n > max {
            let s = max / n;
            for l in &mut self.layers {
                l.weights
                    .iter_mut()
                    .chain(&mut l.bias)
                    .for_each(|v| *v *= s);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(self.lambda.abs(), |m, v| m.max(v.abs()))
    }
}

struct EncoderTape {
    conv: ConvTape,
    out: Field3,
    pool_idx: Vec<usize>,
}

struct DecoderTape {
    conv: ConvTape,
    out: Field3,
    up_channels: usize,
}

/// Intermediates retained by [`Network::forward`] for [`Network::backward`].
pub struct ForwardTape {
    version: u64,
    network_id: u64,
    encoders: Vec<EncoderTape>,
    bottleneck: Option<(ConvTape, Field3)>,
    decoders: Vec<DecoderTape>,
    head: ConvTape,
    activation: Activation,
}

/// Logits plus the tapes of every layer below the activation.
type Trunk = (
    Field3,
    Vec<EncoderTape>,
    Option<(ConvTape, Field3)>,
    Vec<DecoderTape>,
    ConvTape,
);

enum Activation {
    Plain(Field3),
    Regularized(Box<RegActTape>),
}

/// Result of a training-mode forward pass.
pub struct ForwardOutput {
    pub logits: Field3,
    pub probs: ProbField,
    pub tape: ForwardTape,
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

/// Network state: architecture, parameters and the trainable `lambda`.
#[derive(Debug)]
pub struct Network {
    spec: NetSpec,
    params: ParamSet,
    id: u64,
    /// Bumped on every parameter change so stale tapes are rejected.
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            params: self.params.clone(),
            id: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Network {
    /// Builds a network with He-initialized weights; deterministic per seed.
    pub fn build(spec: NetSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Conv2d> = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o, k)| Conv2d::he_init(i, o, k, &mut rng))
            .collect();
        Ok(Self::from_layers(spec, layers))
    }

    pub(crate) fn from_layers(spec: NetSpec, layers: Vec<Conv2d>) -> Network {
        let velocity = layers.iter().map(ConvGrad::zeros_like).collect();
        Network {
            params: ParamSet {
                layers,
                velocity,
                learning_rate: DEFAULT_LEARNING_RATE,
                momentum: DEFAULT_MOMENTUM,
            },
            spec,
            id: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn lambda(&self) -> f64 {
        self.spec.reg.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        self.version += 1;
        self.spec.reg.lambda = lambda;
        Ok(())
    }

    fn check_image(&self, image: &Field3) -> Result<()> {
        if image.channels() != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                what: "input image channels".into(),
                expected: self.spec.input_channels.to_string(),
                got: image.channels().to_string(),
            });
        }
        self.spec.check_image_size(image.height(), image.width())
    }

    /// Runs the convolutional trunk and returns the logits.
    pub fn logits(&self, image: &Field3) -> Result<Field3> {
        self.check_image(image)?;
        Ok(self.trunk(image).0)
    }

    fn trunk(&self, image: &Field3) -> Trunk {
        let layers = &self.params.layers;
        let levels = self.spec.levels();
        let mut encoders = Vec::with_capacity(levels);
        let mut decoders = Vec::with_capacity(levels);
        let mut x = image.clone();
        for layer in layers.iter().take(levels) {
            let (mut e, conv) = layer.forward(&x);
            relu_in_place(&mut e);
            let (p, pool_idx) = max_pool2(&e);
            encoders.push(EncoderTape {
                conv,
                out: e,
                pool_idx,
            });
            x = p;
        }
        let mut bottleneck = None;
        if levels > 0 {
            let (mut b, conv) = layers[levels].forward(&x);
            relu_in_place(&mut b);
            bottleneck = Some((conv, b.clone()));
            x = b;
            for (k, l) in (0..levels).rev().enumerate() {
                let up = upsample2(&x);
                let up_channels = up.channels();
                let cat = concat(&up, &encoders[l].out);
                let (mut d, conv) = layers[levels + 1 + k].forward(&cat);
                relu_in_place(&mut d);
                decoders.push(DecoderTape {
                    conv,
                    out: d.clone(),
                    up_channels,
                });
                x = d;
            }
        }
        let (logits, head) = layers[layers.len() - 1].forward(&x);
        (logits, encoders, bottleneck, decoders, head)
    }

    /// Training-mode forward pass: plain softmax or the one-step regularized
    /// softmax on top of the logits.
    pub fn forward(&self, image: &Field3) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let (logits, encoders, bottleneck, decoders, head) = self.trunk(image);
        let (probs, activation) = match self.spec.activation {
            FinalActivation::Plain => {
                let p = softmax(&logits);
                let a = Activation::Plain(p.as_field().clone());
                (p, a)
            }
            FinalActivation::Regularized => {
                let cfg = RegActConfig::one_step(self.lambda(), self.spec.reg.kappa);
                let (p, tape) = reg_softmax_onestep(&logits, &cfg)?;
                (p, Activation::Regularized(Box::new(tape)))
            }
        };
        Ok(ForwardOutput {
            logits,
            probs,
            tape: ForwardTape {
                version: self.version,
                network_id: self.id,
                encoders,
                bottleneck,
                decoders,
                head,
                activation,
            },
        })
    }

    /// Gradients of the loss given `d_probs = dL/dA` from the matching forward.
    pub fn backward(&self, tape: &ForwardTape, d_probs: &Field3) -> Result<Gradients> {
        if tape.network_id != self.id || tape.version != self.version {
            return Err(Error::TapeMismatch(
                "tape was recorded against different or since-updated parameters".into(),
            ));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let (d_logits, d_lambda) = match &tape.activation {
            Activation::Plain(p) => {
                d_probs.check_shape(p.shape(), "probability gradient")?;
                (softmax_jvp(p, d_probs), 0.0)
            }
            Activation::Regularized(t) => (
                reg_softmax_onestep_backward(t, d_probs)?,
                lambda_gradient(t, d_probs)?,
            ),
        };
        grads.lambda = d_lambda;

        let layers = &self.params.layers;
        let levels = self.spec.levels();
        let n_layers = layers.len();
        let need_input = levels > 0;
        let d_top = layers[n_layers - 1].backward(
            &tape.head,
            &d_logits,
            &mut grads.layers[n_layers - 1],
            need_input,
        );
        let Some(mut d) = d_top else {
            return Ok(grads);
        };

        let mut d_skip: Vec<Option<Field3>> = (0..levels).map(|_| None).collect();
        // Decoders were recorded for l = L-1..0; walk them backwards.
        for (k, dec) in tape.decoders.iter().enumerate().rev() {
            let l = levels - 1 - k;
            relu_backward(&dec.out, &mut d);
            let d_cat = layers[levels + 1 + k]
                .backward(&dec.conv, &d, &mut grads.layers[levels + 1 + k], true)
                .expect("input gradient requested");
            let (d_up, d_e) = split(&d_cat, dec.up_channels);
            d_skip[l] = Some(d_e);
            d = upsample2_backward(&d_up);
        }
        let (b_conv, b_out) = tape.bottleneck.as_ref().expect("levels > 0");
        relu_backward(b_out, &mut d);
        d = layers[levels]
            .backward(b_conv, &d, &mut grads.layers[levels], true)
            .expect("input gradient requested");
        for l in (0..levels).rev() {
            let enc = &tape.encoders[l];
            let mut d_e = max_pool2_backward(&d, &enc.pool_idx, enc.out.shape());
            if let Some(s) = d_skip[l].take() {
                d_e.axpy(1.0, &s);
            }
            relu_backward(&enc.out, &mut d_e);
            match layers[l].backward(&enc.conv, &d_e, &mut grads.layers[l], l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    /// One SGD-momentum step on the parameters and, for the regularized
    /// activation, a clamped gradient step on `lambda`.
    pub fn sgd_momentum_step(&mut self, grads: &Gradients, tau_lambda: f64) -> Result<()> {
        self.params.sgd_momentum_step(grads)?;
        if self.spec.activation == FinalActivation::Regularized {
            self.spec.reg.lambda = update_lambda(self.spec.reg.lambda, grads.lambda, tau_lambda);
        }
        self.version += 1;
        Ok(())
    }

    /// Inference: the regularized activation runs `test_iterations` full
    /// dual iterations. Labels are the per-pixel argmax (ties to the lowest
    /// class).
    pub fn predict(&self, image: &Field3, test_iterations: usize) -> Result<(ProbField, LabelMap)> {
        let logits = self.logits(image)?;
        let probs = match self.spec.activation {
            FinalActivation::Plain => softmax(&logits),
            FinalActivation::Regularized => {
                let cfg =
                    RegActConfig::iterative(self.lambda(), self.spec.reg.tau, test_iterations);
                reg_softmax_iterative_value(&logits, &cfg)?.0
            }
        };
        let labels = LabelMap::argmax(&probs);
        Ok((probs, labels))
    }

    /// Output shape for an input of `height × width`.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<Shape> {
        self.spec.check_image_size(height, width)?;
        Shape::new(self.spec.classes, height, width)
    }
}
