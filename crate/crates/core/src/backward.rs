//! Reverse-mode gradients of the regularized activations.
//!
//! Both backward passes are exact reverse-mode sweeps over the graph the
//! forward pass executed. The softmax Jacobian is symmetric and so is the
//! Jacobian of the unit-disc projection, which keeps every transpose cheap.

use crate::activation::RegActTape;
use crate::error::{Error, Result};
use crate::field::{DualField, Field3};
use crate::grid::{div, grad};

/// Applies the softmax Jacobian at probabilities `a` to `g`:
/// per pixel `(diag(s) - s s^T) g`.
pub fn softmax_jvp(a: &Field3, g: &Field3) -> Field3 {
    debug_assert_eq!(a.shape(), g.shape());
    let s = a.shape();
    let n = s.pixels();
    let ad = a.as_slice();
    let gd = g.as_slice();
    let mut inner = vec![0.0; n];
    for c in 0..s.channels {
        let off = c * n;
        for p in 0..n {
            inner[p] += ad[off + p] * gd[off + p];
        }
    }
    let mut out = Field3::zeros(s);
    let od = out.as_mut_slice();
    for c in 0..s.channels {
        let off = c * n;
        for p in 0..n {
            od[off + p] = ad[off + p] * (gd[off + p] - inner[p]);
        }
    }
    out
}

/// Transpose of the projection Jacobian at `xi`, applied to `v`.
///
/// Identity where `|xi| <= 1`; `(I - x x^T) / |xi|` with `x = xi / |xi|`
/// outside the disc.
pub fn projection_vjp(xi: &DualField, v: &DualField) -> DualField {
    let mut out = v.clone();
    let n = xi.shape().len();
    for k in 0..n {
        let (a, b) = (xi.rows()[k], xi.cols()[k]);
        let norm = a.hypot(b);
        if norm > 1.0 {
            let (ua, ub) = (a / norm, b / norm);
            let (va, vb) = (v.rows()[k], v.cols()[k]);
            let d = ua * va + ub * vb;
            out.rows_mut()[k] = (va - ua * d) / norm;
            out.cols_mut()[k] = (vb - ub * d) / norm;
        }
    }
    out
}

fn check_upstream(tape: &RegActTape, d_out: &Field3) -> Result<()> {
    d_out.check_shape(tape.logits().shape(), "upstream gradient")
}

/// `dL/do` for the one-step scheme.
///
/// Sums the direct path through `softmax(o - lambda div eta)` and the path
/// through `eta = P(-kappa grad softmax(o))`.
pub fn reg_softmax_onestep_backward(tape: &RegActTape, d_out: &Field3) -> Result<Field3> {
    let RegActTape::OneStep {
        base,
        xi,
        output,
        lambda,
        kappa,
        ..
    } = tape
    else {
        return Err(Error::TapeMismatch(
            "one-step backward needs a one-step tape".into(),
        ));
    };
    check_upstream(tape, d_out)?;

    let dz = softmax_jvp(output, d_out);
    let mut d_logits = dz.clone();
    if *lambda == 0.0 {
        return Ok(d_logits);
    }
    // z = o - lambda div(eta)  =>  d_eta = -lambda div^T dz = lambda grad(dz)
    let mut d_eta = grad(&dz);
    d_eta.scale(*lambda);
    let mut d_xi = projection_vjp(xi, &d_eta);
    // xi = -kappa grad(base)  =>  d_base = -kappa grad^T d_xi = kappa div(d_xi)
    d_xi.scale(*kappa);
    let d_base = div(&d_xi);
    d_logits.axpy(1.0, &softmax_jvp(base, &d_base));
    Ok(d_logits)
}

/// `dL/do` for the iterative scheme, unrolled over every stored iterate.
pub fn reg_softmax_unrolled_backward(tape: &RegActTape, d_out: &Field3) -> Result<Field3> {
    let RegActTape::Iterative {
        base,
        history,
        lambda,
        tau,
        ..
    } = tape
    else {
        return Err(Error::TapeMismatch(
            "unrolled backward needs an iterative tape".into(),
        ));
    };
    check_upstream(tape, d_out)?;

    let shape = base.shape();
    let step = tau * lambda;
    let mut d_logits = Field3::zeros(shape);
    // Gradient w.r.t. the current A^k; starts as the loss gradient at A^T.
    let mut d_probs = d_out.clone();
    // Gradient w.r.t. xi^(k+1) flowing back through xi^(k+1) = xi^k - step grad(A^k).
    let mut d_xi_next = DualField::zeros(shape);

    for k in (1..=history.len()).rev() {
        let state = &history[k - 1];
        let dz = softmax_jvp(&state.probs, &d_probs);
        d_logits.axpy(1.0, &dz);

        let mut d_eta = grad(&dz);
        d_eta.scale(*lambda);
        let mut d_xi = projection_vjp(&state.xi, &d_eta);
        d_xi.axpy(1.0, &d_xi_next);

        // A^(k-1) only feeds xi^k: d_A = -step grad^T d_xi = step div(d_xi)
        let mut prev = div(&d_xi);
        prev.scale(step);
        d_probs = prev;
        d_xi_next = d_xi;
    }
    d_logits.axpy(1.0, &softmax_jvp(base, &d_probs));
    Ok(d_logits)
}

/// `dL/dlambda` for a one-step tape, where `eta` does not depend on `lambda`.
pub fn lambda_gradient(tape: &RegActTape, d_out: &Field3) -> Result<f64> {
    let RegActTape::OneStep { eta, output, .. } = tape else {
        return Err(Error::TapeMismatch(
            "lambda gradient is only exact for one-step tapes".into(),
        ));
    };
    check_upstream(tape, d_out)?;
    let dz = softmax_jvp(output, d_out);
    Ok(-div(eta).dot(&dz))
}

/// Gradient step on `lambda`, clamped at zero.
pub fn update_lambda(lambda: f64, grad: f64, tau_lambda: f64) -> f64 {
    (lambda - tau_lambda * grad).max(0.0)
}
