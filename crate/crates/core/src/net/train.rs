//! Cross-entropy loss and the mini-batch SGD-momentum training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Network, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap};

/// Probabilities are floored here before taking logs.
const PROB_FLOOR: f64 = 1e-12;

/// Mean per-pixel negative log-likelihood and its gradient in `a`.
///
/// `loss = -(1/M) sum_pixels log a[target]` with `M` the pixel count of this
/// map. Entries below `1e-12` are treated as `1e-12`.
pub fn cross_entropy(a: &Field3, target: &LabelMap) -> Result<(f64, Field3)> {
    if a.height() != target.height() || a.width() != target.width() {
        return Err(Error::ShapeMismatch {
            what: "label map".into(),
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", target.height(), target.width()),
        });
    }
    let classes = a.channels();
    if target.max_label() as usize >= classes {
        return Err(Error::InvalidConfig(format!(
            "label {} out of range for {classes} classes",
            target.max_label()
        )));
    }
    let m = target.len() as f64;
    let mut d = Field3::zeros(a.shape());
    let mut loss = 0.0;
    let (h, w) = (a.height(), a.width());
    for i in 0..h {
        for j in 0..w {
            let c = target.get(i, j) as usize;
            let p = a.get(c, i, j);
            let pc = p.max(PROB_FLOOR);
            loss -= pc.ln();
            if p >= PROB_FLOOR {
                d.set(c, i, j, -1.0 / (m * p));
            }
        }
    }
    Ok((loss / m, d))
}

pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step size for `lambda`.
    pub lambda_rate: f64,
    /// Rescale the parameter gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            seed: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            lambda_rate: DEFAULT_LEARNING_RATE,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch size must be >= 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            v.push(format!(
                "learning rate must be > 0 (got {})",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!(
                "momentum must lie in [0, 1) (got {})",
                self.momentum
            ));
        }
        if !(self.lambda_rate.is_finite() && self.lambda_rate >= 0.0) {
            v.push(format!(
                "lambda rate must be >= 0 (got {})",
                self.lambda_rate
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                v.push(format!("clip norm must be > 0 (got {c})"));
            }
        }
        v
    }
}

/// Per-iteration loss and `lambda`, plus `lambda` at the end of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// `lambda` after each iteration's update.
    pub lambdas: Vec<f64>,
    pub epoch_lambdas: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,loss,lambda";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (k, (l, lam)) in self.losses.iter().zip(&self.lambdas).enumerate() {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", k + 1, l, lam));
        }
        s
    }
}

/// Trains in place. Batches are drawn from a per-epoch seeded shuffle; the
/// batch gradient is the mean of the per-sample gradients.
pub fn train(net: &mut Network, data: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    {
        let p = net.params_mut();
        p.learning_rate = cfg.learning_rate;
        p.momentum = cfg.momentum;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog {
        losses: Vec::new(),
        lambdas: Vec::new(),
        epoch_lambdas: Vec::with_capacity(cfg.epochs),
        iterations: 0,
        seed: cfg.seed,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(net.params());
            let mut loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                let s = &data[k];
                let out = net.forward(&s.image)?;
                let (l, d) = cross_entropy(&out.probs, &s.label)?;
                loss += scale * l;
                let g = net.backward(&out.tape, &d)?;
                grads.axpy(scale, &g);
            }
            log.iterations += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: log.iterations,
                    loss,
                });
            }
            if let Some(c) = cfg.clip_norm {
                grads.clip_norm(c);
            }
            net.sgd_momentum_step(&grads, cfg.lambda_rate)?;
            log.losses.push(loss);
            log.lambdas.push(net.lambda());
        }
        log.epoch_lambdas.push(net.lambda());
    }
    Ok(log)
}
