//! Dense double-precision kernels: symmetric eigendecomposition (cyclic
//! Jacobi), Cholesky solves and inverses, one-sided Jacobi SVD, Kronecker
//! products and flattening helpers.
//!
//! Everything here is deterministic given identical input bits: no
//! threading, no randomized pivoting, fixed sweep order, and fixed sign
//! conventions (the largest-magnitude component of every eigen/singular
//! vector is made positive, ties resolved by lowest index).

use ndarray::{Array1, Array2};

use crate::error::{CoreError, Result};

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

const MAX_JACOBI_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(values, vectors)` with eigenvalues ascending and eigenvectors
/// as columns, so `m == vectors * diag(values) * vectors.t()`.
pub fn sym_eigen(m: &Mat) -> Result<(Vector, Mat)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(CoreError::shape(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if n == 0 {
        return Err(CoreError::shape("sym_eigen on empty matrix"));
    }

    // Work on the symmetric part so tiny asymmetries from accumulation
    // cannot push the rotations off course.
    let mut a: Mat = 0.5 * (m + &m.t());
    let mut v = Mat::eye(n);

    let scale = frobenius(&a).max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;

    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            converged = true;
            break;
        }

        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
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
    if !converged {
        // One last check after the final sweep.
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if (2.0 * off).sqrt() > 1e-10 * scale {
            return Err(CoreError::numeric(
                "Jacobi eigendecomposition did not converge",
            ));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[[i, i]]
            .partial_cmp(&a[[j, j]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut values = Vector::zeros(n);
    let mut vectors = Mat::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[[src, src]];
        let mut col: Vec<f64> = (0..n).map(|k| v[[k, src]]).collect();
        fix_sign(&mut col);
        for k in 0..n {
            vectors[[k, dst]] = col[k];
        }
    }
    Ok((values, vectors))
}

/// Flips a vector so its largest-magnitude component is positive.
fn fix_sign(col: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = -1.0f64;
    for (i, &x) in col.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if col[best] < 0.0 {
        for x in col.iter_mut() {
            *x = -*x;
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(CoreError::shape("cholesky needs a square matrix"));
    }
    let mut l = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(CoreError::numeric(format!(
                        "matrix not positive definite at pivot {i} (value {sum:.3e})"
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

fn solve_lower_inplace(l: &Mat, b: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * b[k];
        }
        b[i] = sum / l[[i, i]];
    }
}

fn solve_upper_transposed_inplace(l: &Mat, b: &mut [f64]) {
    // Solves Lᵀ x = b for lower-triangular L.
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * b[k];
        }
        b[i] = sum / l[[i, i]];
    }
}

/// Solves `m x = rhs` for symmetric positive definite `m`, column by column.
pub fn spd_solve(m: &Mat, rhs: &Mat) -> Result<Mat> {
    let l = cholesky(m)?;
    let n = m.nrows();
    if rhs.nrows() != n {
        return Err(CoreError::shape("spd_solve rhs row count mismatch"));
    }
    let mut out = rhs.clone();
    let cols = rhs.ncols();
    let mut buf = vec![0.0f64; n];
    for c in 0..cols {
        for r in 0..n {
            buf[r] = out[[r, c]];
        }
        solve_lower_inplace(&l, &mut buf);
        solve_upper_transposed_inplace(&l, &mut buf);
        for r in 0..n {
            out[[r, c]] = buf[r];
        }
    }
    Ok(out)
}

pub fn spd_solve_vec(m: &Mat, rhs: &Vector) -> Result<Vector> {
    let l = cholesky(m)?;
    let mut buf = rhs.to_vec();
    solve_lower_inplace(&l, &mut buf);
    solve_upper_transposed_inplace(&l, &mut buf);
    Ok(Vector::from_vec(buf))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    let n = m.nrows();
    let inv = spd_solve(m, &Mat::eye(n))?;
    // Symmetrize: the exact inverse is symmetric, the solve is not bitwise so.
    Ok(0.5 * (&inv + &inv.t()))
}

/// Full SVD `a = u * diag(sigma) * vt` via one-sided Jacobi.
///
/// Singular values are returned descending. `u` is m×k, `vt` is k×n with
/// k = min(m, n).
pub fn svd(a: &Mat) -> Result<(Mat, Vector, Mat)> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Err(CoreError::shape("svd on empty matrix"));
    }
    if m < n {
        let (u, s, vt) = svd(&a.t().to_owned())?;
        // aᵀ = u s vᵀ  ⇒  a = v s uᵀ
        return Ok((vt.t().to_owned(), s, u.t().to_owned()));
    }

    let mut u = a.clone();
    let mut v = Mat::eye(n);
    let scale = frobenius(&u).max(f64::MIN_POSITIVE);
    let tol = 1e-15;

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0f64;
                let mut beta = 0.0f64;
                let mut gamma = 0.0f64;
                for k in 0..m {
                    alpha += u[[k, p]] * u[[k, p]];
                    beta += u[[k, q]] * u[[k, q]];
                    gamma += u[[k, p]] * u[[k, q]];
                }
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()).max(1e-300 * scale) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let ukp = u[[k, p]];
                    let ukq = u[[k, q]];
                    u[[k, p]] = c * ukp - s * ukq;
                    u[[k, q]] = s * ukp + c * ukq;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|k| u[[k, j]] * u[[k, j]]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut u_out = Mat::zeros((m, n));
    let mut vt_out = Mat::zeros((n, n));
    let mut s_out = Vector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        let sv = sigma[src];
        s_out[dst] = sv;
        let mut ucol: Vec<f64> = if sv > 1e-300 {
            (0..m).map(|k| u[[k, src]] / sv).collect()
        } else {
            vec![0.0; m]
        };
        let mut vcol: Vec<f64> = (0..n).map(|k| v[[k, src]]).collect();
        // Fix sign on u, mirror on v so the product is unchanged.
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, &x) in ucol.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if ucol[best] < 0.0 {
            for x in ucol.iter_mut() {
                *x = -*x;
            }
            for x in vcol.iter_mut() {
                *x = -*x;
            }
        }
        for k in 0..m {
            u_out[[k, dst]] = ucol[k];
        }
        for k in 0..n {
            vt_out[[dst, k]] = vcol[k];
        }
    }
    sigma.clear();
    Ok((u_out, s_out, vt_out))
}

/// Kronecker product `g ⊗ a`: entry `[(i*Ra + k), (j*Ca + l)] = g[i,j] * a[k,l]`.
pub fn kron(g: &Mat, a: &Mat) -> Mat {
    let (rg, cg) = (g.nrows(), g.ncols());
    let (ra, ca) = (a.nrows(), a.ncols());
    let mut out = Mat::zeros((rg * ra, cg * ca));
    for i in 0..rg {
        for j in 0..cg {
            let gij = g[[i, j]];
            if gij == 0.0 {
                continue;
            }
            for k in 0..ra {
                for l in 0..ca {
                    out[[i * ra + k, j * ca + l]] = gij * a[[k, l]];
                }
            }
        }
    }
    out
}

/// Row-major flattening, matching the `vec(W)[r*C + c] = W[r, c]` convention
/// used for all Kronecker-structured quantities in this crate.
pub fn vec_row(w: &Mat) -> Vector {
    Vector::from_iter(w.iter().copied())
}

pub fn mat_from_vec_row(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(CoreError::shape(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_shape_fn((rows, cols), |(r, c)| v[r * cols + c]))
}

pub fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Relative Frobenius error `‖x − y‖ / max(‖y‖, tiny)`.
pub fn rel_fro_err(x: &Mat, y: &Mat) -> f64 {
    frobenius(&(x - y)) / frobenius(y).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_sym_pd(n: usize, rng: &mut Rng) -> Mat {
        let b = Mat::from_shape_fn((n, n), |_| rng.normal());
        b.dot(&b.t()) + Mat::eye(n) * 0.5
    }

    #[test]
    fn eigen_identity_gives_unit_values() {
        let (vals, vecs) = sym_eigen(&Mat::eye(4)).unwrap();
        for v in vals.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let vtv = vecs.t().dot(&vecs);
        assert!(rel_fro_err(&vtv, &Mat::eye(4)) < 1e-12);
    }

    #[test]
    fn eigen_diagonal_sorted_ascending() {
        let m = Mat::from_shape_fn((2, 2), |(i, j)| if i == j { [4.0, 1.0][i] } else { 0.0 });
        let (vals, vecs) = sym_eigen(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 4.0).abs() < 1e-14);
        // Columns are signed permutation vectors with positive pivots.
        assert!((vecs[[1, 0]] - 1.0).abs() < 1e-14);
        assert!((vecs[[0, 1]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstructs_random_matrix() {
        let mut rng = Rng::seed(11);
        for n in [3, 8, 17] {
            let m = random_sym_pd(n, &mut rng);
            let (vals, vecs) = sym_eigen(&m).unwrap();
            let recon = vecs.dot(&Mat::from_diag(&vals)).dot(&vecs.t());
            assert!(rel_fro_err(&recon, &m) < 1e-10, "n={n}");
            let vtv = vecs.t().dot(&vecs);
            assert!(max_abs(&(&vtv - &Mat::eye(n))) < 1e-10);
        }
    }

    #[test]
    fn eigen_deterministic_and_sign_fixed() {
        let mut rng = Rng::seed(3);
        let m = random_sym_pd(6, &mut rng);
        let (v1, e1) = sym_eigen(&m).unwrap();
        let (v2, e2) = sym_eigen(&m).unwrap();
        assert_eq!(v1.to_vec(), v2.to_vec());
        assert_eq!(
            e1.iter().copied().collect::<Vec<_>>(),
            e2.iter().copied().collect::<Vec<_>>()
        );
    }

    #[test]
    fn cholesky_inverse_matches_identity() {
        let mut rng = Rng::seed(7);
        let m = random_sym_pd(9, &mut rng);
        let inv = spd_inverse(&m).unwrap();
        let prod = m.dot(&inv);
        assert!(max_abs(&(&prod - &Mat::eye(9))) < 1e-9);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = Mat::eye(3);
        m[[2, 2]] = -1.0;
        assert!(cholesky(&m).is_err());
    }

    #[test]
    fn svd_reconstructs_rectangular() {
        let mut rng = Rng::seed(23);
        for (m, n) in [(5, 3), (3, 5), (7, 7)] {
            let a = Mat::from_shape_fn((m, n), |_| rng.normal());
            let (u, s, vt) = svd(&a).unwrap();
            let recon = u.dot(&Mat::from_diag(&s)).dot(&vt);
            assert!(rel_fro_err(&recon, &a) < 1e-10, "{m}x{n}");
            for w in s.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn svd_frobenius_identity() {
        let mut rng = Rng::seed(5);
        let a = Mat::from_shape_fn((6, 4), |_| rng.normal());
        let (_, s, _) = svd(&a).unwrap();
        let fro2: f64 = s.iter().map(|x| x * x).sum();
        let direct: f64 = a.iter().map(|x| x * x).sum();
        assert!((fro2 - direct).abs() < 1e-10 * direct.max(1.0));
    }

    #[test]
    fn kron_index_convention() {
        let g = Mat::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f64 + 1.0);
        let a = Mat::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let k = kron(&g, &a);
        assert_eq!(k.nrows(), 6);
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..3 {
                    for c in 0..3 {
                        assert_eq!(k[[i * 3 + r, j * 3 + c]], g[[i, j]] * a[[r, c]]);
                    }
                }
            }
        }
    }

    #[test]
    fn vec_row_round_trips() {
        let w = Mat::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let v = vec_row(&w);
        assert_eq!(v[5], w[[1, 1]]);
        let back = mat_from_vec_row(&v, 3, 4).unwrap();
        assert_eq!(back, w);
    }
}
