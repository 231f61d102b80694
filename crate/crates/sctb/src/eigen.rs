//! Dense real-symmetric eigensolver: Householder tridiagonalisation followed
//! by the implicit-shift QL iteration, after the classic EISPACK
//! tred2 / tql2 pair. Residuals come out at O(n eps ||A||), which the
//! spectral cache contract needs on degenerate ring spectra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn pythag(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Householder reduction of a real symmetric matrix to tridiagonal form,
/// accumulating the orthogonal transformation in place.
fn tred2(z: &mut DMatrix<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = z.nrows();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        let mut scale = 0.0;
        if l > 0 {
            for k in 0..i {
                scale += z[(i, k)].abs();
            }
            if scale == 0.0 {
                e[i] = z[(i, l)];
            } else {
                for k in 0..i {
                    z[(i, k)] /= scale;
                    h += z[(i, k)] * z[(i, k)];
                }
                let f = z[(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[(i, l)] = f - g;
                let mut f_acc = 0.0;
                for j in 0..i {
                    z[(j, i)] = z[(i, j)] / h;
                    let mut g_acc = 0.0;
                    for k in 0..=j {
                        g_acc += z[(j, k)] * z[(i, k)];
                    }
                    for k in (j + 1)..i {
                        g_acc += z[(k, j)] * z[(i, k)];
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * z[(i, j)];
                }
                let hh = f_acc / (h + h);
                for j in 0..i {
                    let f = z[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let delta = f * e[k] + g * z[(i, k)];
                        z[(j, k)] -= delta;
                    }
                }
            }
        } else {
            e[i] = z[(i, l)];
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
                    g += z[(i, k)] * z[(k, j)];
                }
                for k in 0..i {
                    let delta = g * z[(k, i)];
                    z[(k, j)] -= delta;
                }
            }
        }
        d[i] = z[(i, i)];
        z[(i, i)] = 1.0;
        for j in 0..i {
            z[(j, i)] = 0.0;
            z[(i, j)] = 0.0;
        }
    }
}

/// Implicit-shift QL iteration on a symmetric tridiagonal matrix with
/// eigenvector accumulation.
fn tql2(d: &mut [f64], e: &mut [f64], z: &mut DMatrix<f64>) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
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
            if iter > 60 {
                return Err(Error::Numerical(
                    "QL iteration failed to converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = pythag(g, 1.0);
            let sign_r = if g >= 0.0 { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = pythag(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
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
                    f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Full eigendecomposition of a real symmetric matrix; eigenvalues ascending,
/// eigenvector columns matching.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let mut z = matrix.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, &mut d, &mut e);
    tql2(&mut d, &mut e, &mut z)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let eigenvalues = DVector::from_fn(n, |i, _| d[order[i]]);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &z.column(src));
    }
    Ok((eigenvalues, eigenvectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn residual(a: &DMatrix<f64>, vals: &DVector<f64>, vecs: &DMatrix<f64>) -> f64 {
        (a * vecs - vecs * DMatrix::from_diagonal(vals)).abs().max()
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -1.0]);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let r = 5.0f64.sqrt();
        assert_relative_eq!(vals[0], -r, epsilon = 1e-14);
        assert_relative_eq!(vals[1], r, epsilon = 1e-14);
        assert!(residual(&a, &vals, &vecs) < 1e-14);
    }

    #[test]
    fn random_symmetric_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [3usize, 10, 40, 90] {
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let a = (&b + b.transpose()) * 0.5;
            let (vals, vecs) = symmetric_eigen(&a).unwrap();
            let scale = vals.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
            assert!(
                residual(&a, &vals, &vecs) < 1e-12 * scale * n as f64,
                "n = {n}: residual {}",
                residual(&a, &vals, &vecs)
            );
            let ortho = (vecs.transpose() * &vecs - DMatrix::identity(n, n))
                .abs()
                .max();
            assert!(ortho < 1e-13 * n as f64, "n = {n}: ortho {ortho}");
            for i in 1..n {
                assert!(vals[i] >= vals[i - 1]);
            }
        }
    }

    #[test]
    fn degenerate_ring_spectrum() {
        // circulant ring: exact double degeneracies
        let n = 32;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, (i + 1) % n)] = -1.0;
            a[((i + 1) % n, i)] = -1.0;
        }
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(residual(&a, &vals, &vecs) < 1e-13 * n as f64);
        let mut expected: Vec<f64> = (0..n)
            .map(|s| -2.0 * (2.0 * std::f64::consts::PI * s as f64 / n as f64).cos())
            .collect();
        expected.sort_by(f64::total_cmp);
        for (got, want) in vals.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_matrix_is_fixed_point() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 0.5]));
        let (vals, _) = symmetric_eigen(&a).unwrap();
        assert_eq!(vals.as_slice(), &[-1.0, 0.5, 3.0]);
    }
}
