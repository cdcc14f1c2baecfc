//! Plain and TV-regularized activations.
//!
//! The regularized softmax minimizes, per image,
//!
//! ```text
//! -<A, o> + <A, log A> + lambda * TV(A)    subject to  sum_c A[c, pixel] = 1
//! ```
//!
//! by projected ascent on the dual variable:
//!
//! ```text
//! xi  <- xi - tau * lambda * grad(A)
//! eta <- P_B(xi)
//! A   <- softmax(o - lambda * div(eta))
//! ```
//!
//! The regularized ReLU replaces the entropy term by `0.5 * |o - A|^2` and
//! the simplex by `A >= 0`, giving `A <- max(0, o - lambda * div(eta))`.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::field::{DualField, Field3};
use crate::grid::{div, grad, project_in_place};

/// Dual step for the iterative solver. `1/8` is the classical stability
/// bound `1 / |div|^2` for the forward-difference operators.
pub const DEFAULT_TAU: f64 = 0.125;
/// Scaled step `tau * lambda` used by the one-step training scheme.
pub const DEFAULT_KAPPA: f64 = 0.25;
/// Dual iterations at test time.
pub const DEFAULT_TEST_ITERATIONS: usize = 100;
/// Starting value for the trainable weight.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// A field whose channels form a probability vector at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField(Field3);

impl ProbField {
    pub fn as_field(&self) -> &Field3 {
        &self.0
    }

    pub fn into_field(self) -> Field3 {
        self.0
    }

    /// Largest deviation of a per-pixel channel sum from 1.
    pub fn simplex_defect(&self) -> f64 {
        let s = self.0.shape();
        let n = s.pixels();
        let d = self.0.as_slice();
        (0..n)
            .map(|p| {
                let sum: f64 = (0..s.channels).map(|c| d[c * n + p]).sum();
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

impl Deref for ProbField {
    type Target = Field3;

    fn deref(&self) -> &Field3 {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegMode {
    /// A single dual step from zero initialization with fixed step `kappa`.
    OneStep,
    /// `iterations` full dual steps with step `tau * lambda`.
    Iterative,
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegMode::OneStep => "one_step",
            RegMode::Iterative => "iterative",
        })
    }
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(RegMode::OneStep),
            "iterative" => Ok(RegMode::Iterative),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Settings for a regularized activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegActConfig {
    /// Trainable regularization weight.
    pub lambda: f64,
    /// Fixed scaled step of the one-step scheme, decoupled from `lambda`.
    pub kappa: f64,
    /// Dual step of the iterative scheme.
    pub tau: f64,
    pub iterations: usize,
    pub mode: RegMode,
}

impl Default for RegActConfig {
    fn default() -> Self {
        RegActConfig {
            lambda: DEFAULT_LAMBDA,
            kappa: DEFAULT_KAPPA,
            tau: DEFAULT_TAU,
            iterations: 1,
            mode: RegMode::OneStep,
        }
    }
}

impl RegActConfig {
    pub fn one_step(lambda: f64, kappa: f64) -> Self {
        RegActConfig {
            lambda,
            kappa,
            mode: RegMode::OneStep,
            iterations: 1,
            ..Default::default()
        }
    }

    pub fn iterative(lambda: f64, tau: f64, iterations: usize) -> Self {
        RegActConfig {
            lambda,
            tau,
            iterations,
            mode: RegMode::Iterative,
            ..Default::default()
        }
    }

    /// Lists every violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            v.push(format!(
                "lambda must be finite and >= 0 (got {})",
                self.lambda
            ));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            v.push(format!("kappa must be > 0 (got {})", self.kappa));
        }
        if !(self.tau > 0.0 && self.tau <= 0.125) {
            v.push(format!("tau must lie in (0, 1/8] (got {})", self.tau));
        }
        if self.iterations == 0 {
            v.push("iterations must be >= 1".to_string());
        }
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
}

/// One primal-dual iterate `(A^k, xi^k, eta^k)` for `k >= 1`.
#[derive(Debug, Clone)]
pub struct IterState {
    pub probs: Field3,
    pub xi: DualField,
    pub eta: DualField,
}

/// Forward intermediates needed by the backward passes.
#[derive(Debug, Clone)]
pub enum RegActTape {
    OneStep {
        logits: Field3,
        /// `softmax(o)`, the point where the dual step is taken.
        base: Field3,
        xi: DualField,
        eta: DualField,
        output: Field3,
        lambda: f64,
        kappa: f64,
    },
    Iterative {
        logits: Field3,
        /// `A^0 = softmax(o)`.
        base: Field3,
        /// `history[k - 1]` holds iterate `k` for `k = 1..=T`.
        history: Vec<IterState>,
        lambda: f64,
        tau: f64,
        /// `max |A^T - A^(T-1)|`, reported for diagnostics only.
        residual: f64,
    },
}

impl RegActTape {
    pub fn mode(&self) -> RegMode {
        match self {
            RegActTape::OneStep { .. } => RegMode::OneStep,
            RegActTape::Iterative { .. } => RegMode::Iterative,
        }
    }

    pub fn logits(&self) -> &Field3 {
        match self {
            RegActTape::OneStep { logits, .. } | RegActTape::Iterative { logits, .. } => logits,
        }
    }

    pub fn output(&self) -> &Field3 {
        match self {
            RegActTape::OneStep { output, .. } => output,
            RegActTape::Iterative { base, history, .. } => {
                history.last().map(|s| &s.probs).unwrap_or(base)
            }
        }
    }

    /// Final dual variable.
    pub fn eta(&self) -> &DualField {
        match self {
            RegActTape::OneStep { eta, .. } => eta,
            RegActTape::Iterative { history, .. } => {
                &history.last().expect("iterative tape has >= 1 iterate").eta
            }
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            RegActTape::OneStep { lambda, .. } | RegActTape::Iterative { lambda, .. } => *lambda,
        }
    }

    pub fn residual(&self) -> Option<f64> {
        match self {
            RegActTape::OneStep { .. } => None,
            RegActTape::Iterative { residual, .. } => Some(*residual),
        }
    }
}

/// Per-pixel softmax over channels with max subtraction.
pub fn softmax(o: &Field3) -> ProbField {
    let s = o.shape();
    let n = s.pixels();
    let src = o.as_slice();
    let mut out = o.clone();
    let mut maxv = src[..n].to_vec();
    for c in 1..s.channels {
        for (m, &v) in maxv.iter_mut().zip(&src[c * n..(c + 1) * n]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![0.0; n];
    {
        let dst = out.as_mut_slice();
        for c in 0..s.channels {
            let ch = &mut dst[c * n..(c + 1) * n];
            for ((v, m), acc) in ch.iter_mut().zip(&maxv).zip(sum.iter_mut()) {
                *v = (*v - m).exp();
                *acc += *v;
            }
        }
        for c in 0..s.channels {
            for (v, acc) in dst[c * n..(c + 1) * n].iter_mut().zip(&sum) {
                *v /= acc;
            }
        }
    }
    ProbField(out)
}

pub fn relu(o: &Field3) -> Field3 {
    o.map(|v| v.max(0.0))
}

/// `o - lambda * div(eta)`
fn shifted_logits(o: &Field3, lambda: f64, eta: &DualField) -> Field3 {
    let mut z = o.clone();
    if lambda != 0.0 {
        z.axpy(-lambda, &div(eta));
    }
    z
}

/// Iterative regularized softmax. Starts from `A^0 = softmax(o)`, `xi^0 = 0`.
pub fn reg_softmax_iterative(
    o: &Field3,
    cfg: &RegActConfig,
) -> Result<(ProbField, DualField, RegActTape)> {
    check_iterative(cfg)?;
    let base = softmax(o).into_field();
    let mut xi = DualField::zeros(o.shape());
    let mut history: Vec<IterState> = Vec::with_capacity(cfg.iterations);
    let step = cfg.tau * cfg.lambda;
    for _ in 0..cfg.iterations {
        let prev = history.last().map(|s| &s.probs).unwrap_or(&base);
        xi.axpy(-step, &grad(prev));
        let mut eta = xi.clone();
        project_in_place(&mut eta);
        let probs = softmax(&shifted_logits(o, cfg.lambda, &eta)).into_field();
        history.push(IterState {
            probs,
            xi: xi.clone(),
            eta,
        });
    }
    let last = &history[history.len() - 1];
    let before = if history.len() >= 2 {
        &history[history.len() - 2].probs
    } else {
        &base
    };
    let residual = last.probs.max_abs_diff(before);
    let probs = ProbField(last.probs.clone());
    let eta = last.eta.clone();
    let tape = RegActTape::Iterative {
        logits: o.clone(),
        base,
        history,
        lambda: cfg.lambda,
        tau: cfg.tau,
        residual,
    };
    Ok((probs, eta, tape))
}

/// Same iteration as [`reg_softmax_iterative`] without recording a tape.
pub fn reg_softmax_iterative_value(
    o: &Field3,
    cfg: &RegActConfig,
) -> Result<(ProbField, DualField)> {
    check_iterative(cfg)?;
    let mut a = softmax(o);
    let mut xi = DualField::zeros(o.shape());
    let mut eta = xi.clone();
    let step = cfg.tau * cfg.lambda;
    for _ in 0..cfg.iterations {
        xi.axpy(-step, &grad(&a));
        eta.clone_from(&xi);
        project_in_place(&mut eta);
        a = softmax(&shifted_logits(o, cfg.lambda, &eta));
    }
    Ok((a, eta))
}

fn check_iterative(cfg: &RegActConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.mode != RegMode::Iterative {
        return Err(Error::InvalidConfig(
            "reg_softmax_iterative needs an iterative config".into(),
        ));
    }
    Ok(())
}

/// One-step regularized softmax used during training:
/// `xi = -kappa * grad(softmax(o))`, `eta = P(xi)`,
/// `A = softmax(o - lambda * div(eta))`.
pub fn reg_softmax_onestep(o: &Field3, cfg: &RegActConfig) -> Result<(ProbField, RegActTape)> {
    cfg.validate()?;
    if cfg.mode != RegMode::OneStep {
        return Err(Error::InvalidConfig(
            "reg_softmax_onestep needs a one-step config".into(),
        ));
    }
    let base = softmax(o).into_field();
    let mut xi = grad(&base);
    xi.scale(-cfg.kappa);
    let mut eta = xi.clone();
    project_in_place(&mut eta);
    let out = softmax(&shifted_logits(o, cfg.lambda, &eta));
    let tape = RegActTape::OneStep {
        logits: o.clone(),
        base,
        xi,
        eta,
        output: out.as_field().clone(),
        lambda: cfg.lambda,
        kappa: cfg.kappa,
    };
    Ok((out, tape))
}

/// Iterative regularized ReLU (non-negative ROF). Starts from `relu(o)`, `xi^0 = 0`.
pub fn reg_relu_iterative(o: &Field3, cfg: &RegActConfig) -> Result<(Field3, DualField)> {
    cfg.validate()?;
    let mut a = relu(o);
    let mut xi = DualField::zeros(o.shape());
    let mut eta = xi.clone();
    let step = cfg.tau * cfg.lambda;
    for _ in 0..cfg.iterations {
        xi.axpy(-step, &grad(&a));
        eta.clone_from(&xi);
        project_in_place(&mut eta);
        a = relu(&shifted_logits(o, cfg.lambda, &eta));
    }
    Ok((a, eta))
}

/// Test-time TV post-processing of plain-network logits.
pub fn post_tv(o: &Field3, lambda: f64, iterations: usize) -> Result<ProbField> {
    post_tv_with_tau(o, lambda, DEFAULT_TAU, iterations)
}

pub fn post_tv_with_tau(o: &Field3, lambda: f64, tau: f64, iterations: usize) -> Result<ProbField> {
    let cfg = RegActConfig::iterative(lambda, tau, iterations);
    Ok(reg_softmax_iterative_value(o, &cfg)?.0)
}
