//! Dense symmetric linear algebra: Cholesky factorizations and a
//! Householder-tridiagonalization + implicit-QL eigensolver.
//!
//! Matrix sizes here are small (basis dimension, FOV count, gene count), so a
//! self-contained implementation avoids an external LAPACK dependency while
//! keeping every solve deterministic.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::CholeskyFailure(format!(
                        "pivot {sum:.3e} at index {i} of {n}x{n} matrix"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Whether a symmetric matrix admits a Cholesky factorization.
pub fn is_positive_definite(a: &Array2<f64>) -> bool {
    cholesky(a).is_ok()
}

/// Solves `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    // forward: L y = b
    for i in 0..n {
        let mut sum = x[i];
        for k in 0..i {
            sum -= l[[i, k]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        let mut sum = x[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Inverse of `L L^T` from the lower Cholesky factor.
pub fn cholesky_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    // symmetrize against accumulated round-off
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

/// log det(L L^T) from the lower Cholesky factor.
pub fn cholesky_logdet(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and the
/// i-th column of the vector matrix paired with the i-th eigenvalue.
/// Householder reduction to tridiagonal form followed by implicit-shift QL.
pub fn sym_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "sym_eigh expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    let mut z = a.clone();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tred2(&mut z, &mut d, &mut e);
    tqli(&mut d, &mut e, &mut z)?;

    // sort ascending, reordering eigenvector columns with the values
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = z[[r, src]];
        }
    }
    Ok((vals, vecs))
}

/// Householder reduction of a real symmetric matrix to tridiagonal form.
/// On exit `z` holds the accumulated orthogonal transform, `d` the diagonal,
/// `e` the subdiagonal (e[0] unused).
fn tred2(z: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = z.nrows();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        let mut scale = 0.0;
        if l > 0 {
            for k in 0..=l {
                scale += z[[i, k]].abs();
            }
            if scale == 0.0 {
                e[i] = z[[i, l]];
            } else {
                for k in 0..=l {
                    z[[i, k]] /= scale;
                    h += z[[i, k]] * z[[i, k]];
                }
                let mut f = z[[i, l]];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[[i, l]] = f - g;
                f = 0.0;
                for j in 0..=l {
                    z[[j, i]] = z[[i, j]] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[[j, k]] * z[[i, k]];
                    }
                    for k in (j + 1)..=l {
                        g += z[[k, j]] * z[[i, k]];
                    }
                    e[j] = g / h;
                    f += e[j] * z[[i, j]];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = z[[i, j]];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        z[[j, k]] -= f * e[k] + g * z[[i, k]];
                    }
                }
            }
        } else {
            e[i] = z[[i, l]];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += z[[i, k]] * z[[k, j]];
                }
                for k in 0..i {
                    z[[k, j]] -= g * z[[k, i]];
                }
            }
        }
        d[i] = z[[i, i]];
        z[[i, i]] = 1.0;
        for j in 0..i {
            z[[j, i]] = 0.0;
            z[[i, j]] = 0.0;
        }
    }
}

fn pythag(a: f64, b: f64) -> f64 {
    let (aa, ab) = (a.abs(), b.abs());
    if aa > ab {
        aa * (1.0 + (ab / aa).powi(2)).sqrt()
    } else if ab == 0.0 {
        0.0
    } else {
        ab * (1.0 + (aa / ab).powi(2)).sqrt()
    }
}

/// Implicit-shift QL iteration on a tridiagonal matrix, accumulating
/// eigenvectors into `z`.
fn tqli(d: &mut [f64], e: &mut [f64], z: &mut Array2<f64>) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::CholeskyFailure(
                    "symmetric eigensolver failed to converge in 50 iterations".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = pythag(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = pythag(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z[[k, i + 1]];
                    z[[k, i + 1]] = s * z[[k, i]] + c * f;
                    z[[k, i]] = c * z[[k, i]] - s * f;
                }
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> Result<f64> {
    let (vals, _) = sym_eigh(a)?;
    Ok(vals[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut StdRng) -> Array2<f64> {
        let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut a = m.t().dot(&m);
        for i in 0..n {
            a[[i, i]] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_round_trip() {
        let mut rng = StdRng::seed_from_u64(7);
        for n in [1, 2, 5, 20] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a).unwrap();
            let rec = l.dot(&l.t());
            for i in 0..n {
                for j in 0..n {
                    assert!((rec[[i, j]] - a[[i, j]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn solve_and_inverse_agree() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = random_spd(8, &mut rng);
        let l = cholesky(&a).unwrap();
        let b = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let x = cholesky_solve(&l, &b);
        let resid = &a.dot(&x) - &b;
        assert!(resid.iter().all(|r| r.abs() < 1e-9));
        let inv = cholesky_inverse(&l);
        let x2 = inv.dot(&b);
        for i in 0..8 {
            assert!((x[i] - x2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_matches_2x2() {
        let a = array![[2.0, 0.3], [0.3, 1.5]];
        let l = cholesky(&a).unwrap();
        let det = 2.0 * 1.5 - 0.09;
        assert!((cholesky_logdet(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn eigh_recovers_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let (vals, _) = sym_eigh(&a).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigh_reconstructs_random_symmetric() {
        let mut rng = StdRng::seed_from_u64(3);
        for n in [2, 5, 17, 40] {
            let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
            let a = &m + &m.t();
            let (vals, vecs) = sym_eigh(&a).unwrap();
            // ascending order
            for i in 1..n {
                assert!(vals[i] >= vals[i - 1]);
            }
            // A = V diag(vals) V^T
            let lam = Array2::from_diag(&vals);
            let rec = vecs.dot(&lam).dot(&vecs.t());
            let err = (&rec - &a).iter().map(|x| x * x).sum::<f64>().sqrt();
            let nrm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err / nrm < 1e-10, "n={n}: rel err {}", err / nrm);
            // orthonormal columns
            let g = vecs.t().dot(&vecs);
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((g[[i, j]] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigh_agrees_with_cholesky_on_pd() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_spd(12, &mut rng);
        let (vals, _) = sym_eigh(&a).unwrap();
        assert!(vals[0] > 0.0);
        let l = cholesky(&a).unwrap();
        let logdet_eig: f64 = vals.iter().map(|v| v.ln()).sum();
        assert!((cholesky_logdet(&l) - logdet_eig).abs() < 1e-8);
    }
}
