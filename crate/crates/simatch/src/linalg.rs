//! Small dense linear-algebra helpers shared across the crate.
//!
//! Everything here operates on symmetric matrices of modest size (lateral
//! weights, patch covariances), so plain O(m^2)..O(m^3) routines are fine and
//! keep the crate free of LAPACK bindings.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Max |a_ij - a_ji| over the matrix; 0 for an exactly symmetric one.
pub fn symmetry_defect(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

pub fn ensure_symmetric(a: &Array2<f64>, tol: f64, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let defect = symmetry_defect(a);
    if defect > tol {
        return Err(Error::Numerical(format!(
            "{what} is not symmetric: max |a_ij - a_ji| = {defect:.3e} > {tol:.1e}"
        )));
    }
    Ok(())
}

pub fn ensure_finite_matrix(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub fn ensure_finite_vector(a: &Array1<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Gershgorin upper bound on the largest eigenvalue of a symmetric matrix.
pub fn gershgorin_upper(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut bound = f64::NEG_INFINITY;
    for i in 0..n {
        let mut radius = 0.0;
        for j in 0..n {
            if j != i {
                radius += a[[i, j]].abs();
            }
        }
        bound = bound.max(a[[i, i]] + radius);
    }
    bound.max(0.0)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration
/// (Rayleigh-quotient estimate, at most `iters` iterations, relative
/// tolerance `tol`).
pub fn power_iteration_lambda_max(a: &Array2<f64>, iters: usize, tol: f64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start with unequal entries so it is never orthogonal to
    // the top eigenvector by symmetry accident.
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + 0.5 * (i as f64 + 1.0) / n as f64);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);

    let mut lambda = 0.0f64;
    for _ in 0..iters {
        let w = a.dot(&v);
        let new_lambda = v.dot(&w);
        let w_norm = w.dot(&w).sqrt();
        if w_norm <= f64::MIN_POSITIVE {
            return 0.0; // a == 0
        }
        v = w / w_norm;
        if (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1.0) {
            return new_lambda;
        }
        lambda = new_lambda;
    }
    lambda
}

/// Smallest eigenvalue of a symmetric matrix via power iteration on the
/// shifted matrix `c*I - A` with `c` the Gershgorin upper bound.
pub fn lambda_min_estimate(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let shift = gershgorin_upper(a);
    let mut shifted = -a.clone();
    for i in 0..n {
        shifted[[i, i]] += shift;
    }
    shift - power_iteration_lambda_max(&shifted, 50, 1e-10)
}

/// In-place lower-triangular Cholesky factor of a symmetric PD matrix.
/// Fails if the matrix is not (numerically) positive definite.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (pivot {j} = {diag:.3e})"
            )));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    let n = b.len();
    // forward substitution L y = b
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    // back substitution L^T x = y
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns,
/// eigenvalues in ascending order. Intended for the moderate dimensions used
/// by whitening and diagnostics, not for large matrices.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    ensure_symmetric(a, 1e-9 * (1.0 + gershgorin_upper(a)), "symmetric_eigen input")?;
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    let off_norm = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[[i, j]] * m[[i, j]];
            }
        }
        s.sqrt()
    };
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        if off_norm(&m) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rows/cols p and q of m
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[[k, dst]] = v[[k, src]];
        }
    }
    Ok((eigenvalues, eigenvectors))
}

/// 64-bit FNV-1a over raw bytes; used to fingerprint datasets and configs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
