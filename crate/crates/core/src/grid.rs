//! Discrete differential operators on pixel grids.
//!
//! `grad` uses forward differences with a zero (Neumann) boundary in the last
//! row/column. `div` is defined as the exact negative adjoint of `grad`, so
//! `<grad u, p> = -<u, div p>` holds to rounding for every `u` and `p`.

use crate::field::{DualField, Field3};

/// Forward-difference gradient of every channel.
pub fn grad(u: &Field3) -> DualField {
    let s = u.shape();
    let (h, w) = (s.height, s.width);
    let mut out = DualField::zeros(s);
    let src = u.as_slice();
    {
        let rows = out.rows_mut();
        for c in 0..s.channels {
            let base = c * h * w;
            for i in 0..h.saturating_sub(1) {
                let r = base + i * w;
                for j in 0..w {
                    rows[r + j] = src[r + w + j] - src[r + j];
                }
            }
        }
    }
    {
        let cols = out.cols_mut();
        for c in 0..s.channels {
            let base = c * h * w;
            for i in 0..h {
                let r = base + i * w;
                for j in 0..w.saturating_sub(1) {
                    cols[r + j] = src[r + j + 1] - src[r + j];
                }
            }
        }
    }
    out
}

/// Discrete divergence, the negative adjoint of [`grad`].
///
/// Per channel: `(p1[i,j] - p1[i-1,j]) + (p2[i,j] - p2[i,j-1])` where
/// `p1[-1,j] = p1[N1-1,j] = 0` and `p2[i,-1] = p2[i,N2-1] = 0`.
pub fn div(p: &DualField) -> Field3 {
    let s = p.shape();
    let (h, w) = (s.height, s.width);
    let mut out = Field3::zeros(s);
    let rows = p.rows();
    let cols = p.cols();
    let dst = out.as_mut_slice();
    for c in 0..s.channels {
        let base = c * h * w;
        for i in 0..h {
            let r = base + i * w;
            for j in 0..w {
                let k = r + j;
                let mut v = 0.0;
                if i + 1 < h {
                    v += rows[k];
                }
                if i > 0 {
                    v -= rows[k - w];
                }
                if j + 1 < w {
                    v += cols[k];
                }
                if j > 0 {
                    v -= cols[k - 1];
                }
                dst[k] = v;
            }
        }
    }
    out
}

/// Projects a single 2-vector onto the closed unit disc.
#[inline]
pub fn project_vec(y: (f64, f64)) -> (f64, f64) {
    let n = y.0.hypot(y.1);
    if n <= 1.0 {
        y
    } else {
        (y.0 / n, y.1 / n)
    }
}

/// Projects every per-pixel, per-channel 2-vector onto the unit disc.
pub fn project_unit_disc(p: &DualField) -> DualField {
    let mut out = p.clone();
    project_in_place(&mut out);
    out
}

pub(crate) fn project_in_place(p: &mut DualField) {
    let n = p.shape().len();
    for k in 0..n {
        let (a, b) = (p.rows()[k], p.cols()[k]);
        let norm = a.hypot(b);
        if norm > 1.0 {
            p.rows_mut()[k] = a / norm;
            p.cols_mut()[k] = b / norm;
        }
    }
}

/// Isotropic total variation summed over channels.
pub fn tv_value(u: &Field3) -> f64 {
    let g = grad(u);
    g.rows()
        .iter()
        .zip(g.cols())
        .map(|(a, b)| a.hypot(*b))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Shape;
    use proptest::prelude::*;

    fn field(c: usize, h: usize, w: usize, v: &[f64]) -> Field3 {
        Field3::from_vec(Shape::new(c, h, w).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let g = grad(&Field3::filled(Shape::new(2, 3, 4).unwrap(), 1.7));
        assert_eq!(g.max_norm(), 0.0);
    }

    #[test]
    fn grad_two_by_one() {
        let g = grad(&field(1, 2, 1, &[0.0, 2.0]));
        assert_eq!(g.rows(), &[2.0, 0.0]);
        assert_eq!(g.cols(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_two_by_two() {
        let g = grad(&field(1, 2, 2, &[0.0, 1.0, 0.0, 1.0]));
        assert_eq!(g.cols(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.rows(), &[0.0; 4]);
    }

    #[test]
    fn div_of_zero_is_zero() {
        let d = div(&DualField::zeros(Shape::new(2, 3, 3).unwrap()));
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn div_two_by_one() {
        let s = Shape::new(1, 2, 1).unwrap();
        let p = DualField::from_components(s, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let d = div(&p);
        assert_eq!(d.as_slice(), &[1.0, -1.0]);
        let u = field(1, 2, 1, &[0.0, 2.0]);
        assert_eq!(grad(&u).dot(&p), 2.0);
        assert_eq!(-u.dot(&d), 2.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_vec((0.3, -0.4)), (0.3, -0.4));
        let (a, b) = project_vec((3.0, 4.0));
        assert!((a - 0.6).abs() < 1e-15 && (b - 0.8).abs() < 1e-15);
        assert_eq!(project_vec((0.6, 0.8)), (0.6, 0.8));
    }

    #[test]
    fn tv_examples() {
        assert_eq!(
            tv_value(&Field3::filled(Shape::new(3, 4, 4).unwrap(), 0.2)),
            0.0
        );
        assert_eq!(tv_value(&field(1, 2, 2, &[0.0, 1.0, 0.0, 1.0])), 2.0);
    }

    fn arb_field(c: usize, h: usize, w: usize) -> impl Strategy<Value = Field3> {
        prop::collection::vec(-3.0f64..3.0, c * h * w)
            .prop_map(move |v| Field3::from_vec(Shape::new(c, h, w).unwrap(), v).unwrap())
    }

    fn arb_dual(c: usize, h: usize, w: usize) -> impl Strategy<Value = DualField> {
        let n = c * h * w;
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
            .prop_map(move |(r, k)| {
                DualField::from_components(Shape::new(c, h, w).unwrap(), r, k).unwrap()
            })
    }

    proptest! {
        #[test]
        fn adjointness(u in arb_field(2, 5, 7), p in arb_dual(2, 5, 7)) {
            let lhs = grad(&u).dot(&p);
            let rhs = u.dot(&div(&p));
            prop_assert!((lhs + rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn grad_and_div_are_linear(
            u in arb_field(1, 4, 3), v in arb_field(1, 4, 3),
            p in arb_dual(1, 4, 3), q in arb_dual(1, 4, 3),
            a in -2.0f64..2.0,
        ) {
            let mut w = u.clone();
            w.axpy(a, &v);
            let mut expect = grad(&u);
            expect.axpy(a, &grad(&v));
            prop_assert!(grad(&w).max_abs_diff(&expect) < 1e-12);

            let mut r = p.clone();
            r.axpy(a, &q);
            let mut expect = div(&p);
            expect.axpy(a, &div(&q));
            prop_assert!(div(&r).max_abs_diff(&expect) < 1e-12);
        }

        #[test]
        fn projection_idempotent_and_nonexpansive(
            y in (-5.0f64..5.0, -5.0f64..5.0), z in (-5.0f64..5.0, -5.0f64..5.0)
        ) {
            let py = project_vec(y);
            prop_assert!(py.0.hypot(py.1) <= 1.0 + 1e-12);
            let ppy = project_vec(py);
            prop_assert!((ppy.0 - py.0).abs() < 1e-15 && (ppy.1 - py.1).abs() < 1e-15);
            let pz = project_vec(z);
            let d_out = (py.0 - pz.0).hypot(py.1 - pz.1);
            let d_in = (y.0 - z.0).hypot(y.1 - z.1);
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn tv_is_positively_homogeneous(u in arb_field(2, 4, 4), a in -4.0f64..4.0) {
            let tv = tv_value(&u);
            prop_assert!(tv >= 0.0);
            let scaled = u.map(|v| a * v);
            prop_assert!((tv_value(&scaled) - a.abs() * tv).abs() <= 1e-10 * (1.0 + tv));
        }
    }
}
