//! Small dense linear-algebra helpers shared by the connectivity estimator
//! and the synthetic data generator.

use ndarray::{Array1, Array2};

use crate::error::{EcdiffError, Result};

/// Inverse of a square matrix via LU decomposition with partial pivoting.
///
/// Errors when a pivot underflows, which signals a singular (or numerically
/// degenerate) system.
pub fn invert(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(EcdiffError::Shape(format!(
            "invert expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    // Augmented Gauss-Jordan with row pivoting.
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[[col, col]].abs();
        for r in (col + 1)..n {
            let v = m[[r, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < 1e-300 {
            return Err(EcdiffError::Numerical(format!(
                "singular matrix in invert (pivot {:.3e} at column {})",
                pivot_val, col
            )));
        }
        if pivot_row != col {
            for c in 0..n {
                m.swap([col, c], [pivot_row, c]);
                inv.swap([col, c], [pivot_row, c]);
            }
        }
        let p = m[[col, col]];
        for c in 0..n {
            m[[col, c]] /= p;
            inv[[col, c]] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[[r, col]];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                let mc = m[[col, c]];
                let ic = inv[[col, c]];
                m[[r, c]] -= f * mc;
                inv[[r, c]] -= f * ic;
            }
        }
    }
    Ok(inv)
}

/// Spectral radius of a square matrix, via Gelfand's formula with repeated
/// squaring: ρ(A) = ||A^(2^k)||^(1/2^k) for large k. Deterministic and
/// accurate enough for stability rescaling (relative error well under 1e-3
/// for the small matrices used here).
pub fn spectral_radius(a: &Array2<f64>) -> f64 {
    let norm0 = operator_norm(a);
    if norm0 == 0.0 {
        return 0.0;
    }
    // Normalize before squaring so powers stay representable:
    // track A^(2^j) = s_j · M_j with ||M_j|| = 1 and s_j in log space.
    let mut m = a.mapv(|v| v / norm0);
    let mut log_s = norm0.ln();
    let k = 8; // estimates via A^256
    for _ in 0..k {
        m = m.dot(&m);
        let n = operator_norm(&m);
        if n == 0.0 {
            return 0.0;
        }
        m.mapv_inplace(|v| v / n);
        log_s = 2.0 * log_s + n.ln();
    }
    (log_s / (1u64 << k) as f64).exp()
}

/// Largest singular value of `a`, estimated by power iteration on `aᵀa`.
///
/// Deterministic: starts from a fixed vector. The operator 2-norm upper-bounds
/// the spectral radius.
pub fn operator_norm(a: &Array2<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::<f64>::from_elem(n, (n as f64).powf(-0.5));
    let mut sigma = 0.0;
    for _ in 0..200 {
        let w = a.dot(&v);
        let u = a.t().dot(&w);
        let norm = u.dot(&u).sqrt();
        if norm < 1e-30 {
            return 0.0;
        }
        let next = norm.sqrt();
        if (next - sigma).abs() <= 1e-12 * next.max(1.0) {
            sigma = next;
            break;
        }
        sigma = next;
        v = u / norm;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn invert_recovers_identity() {
        let a = array![[4.0, 2.0, 0.5], [1.0, 3.0, -1.0], [0.0, 2.0, 5.0]];
        let inv = invert(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invert_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(invert(&a).is_err());
    }

    #[test]
    fn operator_norm_matches_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -7.0]];
        assert!((operator_norm(&a) - 7.0).abs() < 1e-9);
    }
}
