//! Independent brute-force minimizers for tiny grids.
//!
//! Both primal problems are solved directly with damped Newton on a smoothed
//! TV term `sqrt(dx^2 + dy^2 + eps^2)`, driving `eps` (and the ReLU log
//! barrier weight) towards zero. Nothing here touches the dual iteration.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tvseg::{Field3, Shape};

/// Forward-difference pairs `(p, q)` meaning `x[q] - x[p]` per pixel and
/// axis; `None` where the Neumann boundary makes the difference zero.
fn stencil(h: usize, w: usize) -> Vec<[Option<(usize, usize)>; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let down = (i + 1 < h).then(|| (p, p + w));
            let right = (j + 1 < w).then(|| (p, p + 1));
            out.push([down, right]);
        }
    }
    out
}

/// Smoothed TV of one channel with gradient and Hessian accumulated into
/// `g` and `hess` scaled by `weight`.
fn tv_smooth(
    x: &[f64],
    h: usize,
    w: usize,
    eps: f64,
    weight: f64,
    g: &mut [f64],
    hess: &mut [Vec<f64>],
) -> f64 {
    let mut total = 0.0;
    for terms in stencil(h, w) {
        let d: Vec<(usize, usize, f64)> = terms
            .iter()
            .flatten()
            .map(|&(p, q)| (p, q, x[q] - x[p]))
            .collect();
        let t = (d.iter().map(|&(_, _, v)| v * v).sum::<f64>() + eps * eps).sqrt();
        total += t;
        // u = G^T d, so grad t = u / t and hess t = G^T G / t - u u^T / t^3
        let n = x.len();
        let mut u = vec![0.0; n];
        for &(p, q, v) in &d {
            u[q] += v;
            u[p] -= v;
        }
        for k in 0..n {
            g[k] += weight * u[k] / t;
        }
        for &(p, q, _) in &d {
            for (a, b, s) in [(p, p, 1.0), (q, q, 1.0), (p, q, -1.0), (q, p, -1.0)] {
                hess[a][b] += weight * s / t;
            }
        }
        for a in 0..n {
            for b in 0..n {
                hess[a][b] -= weight * u[a] * u[b] / (t * t * t);
            }
        }
    }
    total
}

#[allow(clippy::needless_range_loop)]
fn solve_spd(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    // Gaussian elimination with partial pivoting; n is at most a few dozen
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

type Objective<'a> = dyn Fn(&[f64], f64, f64, &mut [f64], &mut [Vec<f64>]) -> f64 + 'a;

/// Damped Newton with backtracking for each `(eps, mu)` stage in turn.
fn newton(x0: Vec<f64>, f: &Objective, feasible: &dyn Fn(&[f64]) -> bool) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0;
    let stages = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10];
    for &eps in &stages {
        let mu = eps * eps;
        for _ in 0..200 {
            let mut g = vec![0.0; n];
            let mut hm = vec![vec![0.0; n]; n];
            let fx = f(&x, eps, mu, &mut g, &mut hm);
            for (k, row) in hm.iter_mut().enumerate() {
                row[k] += 1e-14;
            }
            let step = solve_spd(hm, g.iter().map(|v| -v).collect());
            let slope: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
            if -slope < 1e-24 {
                break;
            }
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(x, s)| x + t * s).collect();
                if feasible(&cand) {
                    let mut dummy_g = vec![0.0; n];
                    let mut dummy_h = vec![vec![0.0; n]; n];
                    if f(&cand, eps, mu, &mut dummy_g, &mut dummy_h) <= fx + 1e-4 * t * slope {
                        x = cand;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    x
}

/// Minimizer of `-<A,o> + <A,log A> + lambda TV(A)` over the simplex, C = 2.
pub fn softmax_oracle(o: &Field3, lambda: f64) -> Field3 {
    assert_eq!(o.channels(), 2);
    let (h, w) = (o.height(), o.width());
    let n = h * w;
    let (o0, o1) = (o.channel(0).to_vec(), o.channel(1).to_vec());
    // A[0] = a, A[1] = 1 - a; both channels contribute the same TV
    let f = move |a: &[f64], eps: f64, _mu: f64, g: &mut [f64], hm: &mut [Vec<f64>]| {
        let mut v = 0.0;
        for p in 0..n {
            let (x, y) = (a[p], 1.0 - a[p]);
            v += -x * o0[p] - y * o1[p] + x * x.ln() + y * y.ln();
            g[p] += -o0[p] + o1[p] + x.ln() - y.ln();
            hm[p][p] += 1.0 / x + 1.0 / y;
        }
        v + tv_smooth(a, h, w, eps, 2.0 * lambda, g, hm) * 2.0 * lambda
    };
    let x0 = vec![0.5; n];
    let a = newton(x0, &f, &|a| a.iter().all(|&v| v > 0.0 && v < 1.0));
    Field3::from_fn(o.shape(), |c, i, j| {
        if c == 0 {
            a[i * w + j]
        } else {
            1.0 - a[i * w + j]
        }
    })
}

/// Minimizer of `0.5 |o - A|^2 + lambda TV(A)` over `A >= 0`, channel by
/// channel, using a vanishing log barrier.
pub fn relu_oracle(o: &Field3, lambda: f64) -> Field3 {
    let (h, w) = (o.height(), o.width());
    let n = h * w;
    let mut out = Vec::with_capacity(o.shape().len());
    for c in 0..o.channels() {
        let oc = o.channel(c).to_vec();
        let f = |a: &[f64], eps: f64, mu: f64, g: &mut [f64], hm: &mut [Vec<f64>]| {
            let mut v = 0.0;
            for p in 0..n {
                v += 0.5 * (a[p] - oc[p]).powi(2) - mu * a[p].ln();
                g[p] += a[p] - oc[p] - mu / a[p];
                hm[p][p] += 1.0 + mu / (a[p] * a[p]);
            }
            v + tv_smooth(a, h, w, eps, lambda, g, hm) * lambda
        };
        let x0 = oc.iter().map(|v| v.abs() + 1.0).collect();
        out.extend(newton(x0, &f, &|a| a.iter().all(|&v| v > 0.0)));
    }
    Field3::from_vec(o.shape(), out).unwrap()
}

/// Oracle instances: every 2x2 and 1x3 grid with C = 2, over a fixed set of
/// logits and weights.
pub fn oracle_instances() -> Vec<(Field3, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for (h, w) in [(2, 2), (1, 3)] {
        let s = Shape::new(2, h, w).unwrap();
        for &lambda in &[0.05, 0.2, 0.5, 1.0] {
            // structured: constant, step edge, single spike
            out.push((Field3::filled(s, 0.3), lambda));
            out.push((
                Field3::from_fn(s, |c, _, j| if (j == 0) == (c == 0) { 1.0 } else { -1.0 }),
                lambda,
            ));
            out.push((
                Field3::from_fn(
                    s,
                    |c, i, j| if c == 1 && i == 0 && j == 0 { 2.0 } else { 0.0 },
                ),
                lambda,
            ));
            for _ in 0..4 {
                out.push((
                    Field3::from_fn(s, |_, _, _| 2.0 * rng.sample::<f64, _>(StandardNormal)),
                    lambda,
                ));
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Field3, b: &Field3) -> f64 {
    a.max_abs_diff(b)
}
