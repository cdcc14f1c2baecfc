//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::Field3;

/// Fields up to this many entries are probed at every coordinate.
pub const FULL_PROBE_LIMIT: usize = 200;
/// Probe count for larger fields.
pub const SAMPLED_PROBES: usize = 200;

/// Outcome of comparing an analytic gradient against central differences.
///
/// The relative error at a probed coordinate is
/// `|analytic - numeric| / max(|numeric|, 1e-3 * max|numeric|, 1e-12)`,
/// i.e. relative to the numeric value, floored at a small fraction of the
/// largest numeric component so that near-zero entries do not blow up.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    /// Probes whose forward evaluation was not finite; they count as failures.
    pub non_finite: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub const CSV_HEADER: &'static str = "check,max_rel_error,max_abs_error,probes,tolerance,pass";

    pub fn csv_row(&self, check: &str) -> String {
        format!(
            "{check},{:.6e},{:.6e},{},{:e},{}",
            self.max_rel_error, self.max_abs_error, self.probes, self.tolerance, self.pass
        )
    }
}

/// Which coordinates to probe.
#[derive(Debug, Clone)]
pub enum Probes {
    /// All coordinates up to [`FULL_PROBE_LIMIT`], otherwise a seeded sample
    /// of [`SAMPLED_PROBES`] distinct coordinates (all of them if fewer).
    Auto {
        seed: u64,
    },
    Explicit(Vec<usize>),
}

impl Probes {
    fn resolve(&self, len: usize) -> Vec<usize> {
        match self {
            Probes::Auto { seed } => {
                if len <= FULL_PROBE_LIMIT {
                    (0..len).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let mut idx = sample(&mut rng, len, SAMPLED_PROBES).into_vec();
                    idx.sort_unstable();
                    idx
                }
            }
            Probes::Explicit(v) => v.clone(),
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    Ok(())
}

/// Checks `analytic` against central differences of `forward` at `point`.
pub fn finite_diff_check(
    forward: impl Fn(&Field3) -> f64,
    point: &Field3,
    analytic: &Field3,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport> {
    analytic.check_shape(point.shape(), "analytic gradient")?;
    let shape = point.shape();
    finite_diff_check_slice(
        |x| forward(&Field3::from_vec(shape, x.to_vec()).expect("perturbed point is finite")),
        point.as_slice(),
        analytic.as_slice(),
        epsilon,
        tolerance,
        &Probes::Auto { seed: 0 },
    )
}

/// Flat-slice variant used for parameter vectors.
pub fn finite_diff_check_slice(
    mut forward: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
    tolerance: f64,
    probes: &Probes,
) -> Result<GradReport> {
    check_epsilon(epsilon)?;
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            what: "analytic gradient".into(),
            expected: point.len().to_string(),
            got: analytic.len().to_string(),
        });
    }
    let idx = probes.resolve(point.len());
    if let Some(&bad) = idx.iter().find(|&&k| k >= point.len()) {
        return Err(Error::InvalidConfig(format!(
            "probe index {bad} out of range for {} entries",
            point.len()
        )));
    }

    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(idx.len());
    let mut non_finite = 0;
    for &k in &idx {
        let orig = x[k];
        x[k] = orig + epsilon;
        let fp = forward(&x);
        x[k] = orig - epsilon;
        let fm = forward(&x);
        x[k] = orig;
        let d = (fp - fm) / (2.0 * epsilon);
        if !d.is_finite() {
            non_finite += 1;
        }
        numeric.push(d);
    }

    let scale = numeric
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&k, &n) in idx.iter().zip(&numeric) {
        if !n.is_finite() {
            continue;
        }
        let diff = (analytic[k] - n).abs();
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / n.abs().max(floor));
    }
    if analytic.iter().any(|v| !v.is_finite()) {
        max_rel = f64::INFINITY;
        max_abs = f64::INFINITY;
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        probes: idx.len(),
        non_finite,
        tolerance,
        pass: non_finite == 0 && max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Shape;

    fn quad_setup() -> (Field3, Field3, impl Fn(&Field3) -> f64) {
        let s = Shape::new(2, 3, 3).unwrap();
        let x = Field3::from_fn(s, |c, i, j| {
            (c as f64 - 0.5) * (i as f64 + 1.0) - j as f64 * 0.3
        });
        let w = Field3::from_fn(s, |c, i, j| 1.0 + 0.1 * (c + i + j) as f64);
        let f = move |y: &Field3| -> f64 {
            y.as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| 0.5 * b * a * a + 2.0 * a)
                .sum()
        };
        let ws = Field3::from_fn(s, |c, i, j| 1.0 + 0.1 * (c + i + j) as f64);
        let g = x.zip_map(&ws, |a, b| b * a + 2.0);
        (x, g, f)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let (x, g, f) = quad_setup();
        let r = finite_diff_check(f, &x, &g, 1e-4, 1e-9).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.probes, 18);
    }

    #[test]
    fn doubled_gradient_fails() {
        let (x, g, f) = quad_setup();
        let r = finite_diff_check(f, &x, &g.map(|v| 2.0 * v), 1e-5, 1e-6).unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn epsilon_range_enforced() {
        let (x, g, f) = quad_setup();
        assert!(finite_diff_check(&f, &x, &g, 1e-2, 1e-6).is_err());
        assert!(finite_diff_check(&f, &x, &g, 1e-9, 1e-6).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let (x, g, _) = quad_setup();
        let r = finite_diff_check(|_| f64::NAN, &x, &g, 1e-5, 1e-6).unwrap();
        assert_eq!(r.non_finite, r.probes);
        assert!(!r.pass);
    }

    #[test]
    fn large_fields_are_sampled() {
        let n = 1000;
        let x = vec![0.5; n];
        let g = vec![1.0; n];
        let r = finite_diff_check_slice(
            |v| v.iter().sum(),
            &x,
            &g,
            1e-5,
            1e-8,
            &Probes::Auto { seed: 3 },
        )
        .unwrap();
        assert_eq!(r.probes, SAMPLED_PROBES);
        assert!(r.pass);
    }
}
