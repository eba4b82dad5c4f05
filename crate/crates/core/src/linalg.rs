//! Small dense linear solves (normal equations of a handful of unknowns).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solves `a·x = b` in place by Gaussian elimination with partial pivoting.
///
/// `a` is row-major `n×n`. Fails when a pivot falls below `rel_tol` times the
/// largest absolute entry of `a`.
pub fn solve_dense<T: Scalar>(a: &mut [T], b: &mut [T], rel_tol: T) -> Result<()> {
    let n = b.len();
    assert_eq!(a.len(), n * n, "matrix must be n×n");
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if !(scale > T::zero()) {
        return Err(Error::Singular("zero matrix"));
    }
    let tol = rel_tol * scale;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if !(a[piv * n + col].abs() > tol) {
            return Err(Error::Singular("pivot below tolerance"));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[r * n + c] -= f * v;
            }
            let bc = b[col];
            b[r] -= f * bc;
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_with_pivoting() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x = [1.0f64, -2.0, 0.5];
        let mut b = vec![0.0 * x[0] + 2.0 * x[1] + 1.0 * x[2], x[0] + x[1], 3.0 * x[0] + x[2]];
        solve_dense(&mut a, &mut b, 1e-12).unwrap();
        for (u, v) in b.iter().zip(x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_reported() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense(&mut a, &mut b, 1e-12).is_err());
    }
}
