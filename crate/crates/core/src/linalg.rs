//! Dense linear-algebra helpers shared by the oracles.

use nalgebra::{linalg::Schur, Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum absolute row sum.
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `||A||∞ · ||A⁻¹||∞`, or infinity when `A` is singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    match a.clone().try_inverse() {
        Some(inv) => inf_norm(a) * inf_norm(&inv),
        None => f64::INFINITY,
    }
}

/// Solves `A x = b` by partial-pivot LU.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Numeric {
        reason: "LU factorisation is singular".into(),
        condition: condition_estimate(a),
    })
}

/// Solves `A X = B` for several right-hand sides at once.
pub fn solve_many(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Numeric {
        reason: "LU factorisation is singular".into(),
        condition: condition_estimate(a),
    })
}

/// All eigenvalues of a general real square matrix.
///
/// Rows and columns that isolate an eigenvalue are peeled off first by
/// permutation (rows pushed down, then columns pushed left), the same
/// preprocessing LAPACK's `dgebal` performs; the remaining core goes through
/// a real Schur decomposition. Matrices that are triangular up to a
/// permutation therefore get their diagonal back exactly.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    assert!(a.is_square(), "eigenvalues of a non-square matrix");
    let n = a.nrows();
    let mut active: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);

    // Row phase: a row whose off-diagonal entries vanish on the active set.
    loop {
        let found = active.iter().position(|&i| {
            active.iter().all(|&j| j == i || a[(i, j)] == 0.0)
        });
        match found {
            Some(pos) => {
                let i = active.remove(pos);
                out.push(Complex::new(a[(i, i)], 0.0));
            }
            None => break,
        }
    }
    // Column phase, on what is left.
    loop {
        let found = active.iter().position(|&j| {
            active.iter().all(|&i| i == j || a[(i, j)] == 0.0)
        });
        match found {
            Some(pos) => {
                let j = active.remove(pos);
                out.push(Complex::new(a[(j, j)], 0.0));
            }
            None => break,
        }
    }

    if !active.is_empty() {
        let k = active.len();
        let core = DMatrix::from_fn(k, k, |r, c| a[(active[r], active[c])]);
        let schur = Schur::try_new(core, f64::EPSILON, 100_000).ok_or_else(|| Error::Numeric {
            reason: format!("Schur iteration did not converge on a {k}x{k} core"),
            condition: f64::NAN,
        })?;
        out.extend(schur.complex_eigenvalues().iter().copied());
    }
    Ok(out)
}
