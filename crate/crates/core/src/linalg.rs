//! Small dense symmetric eigensolver and power iteration.
//!
//! The eigensolver is a cyclic Jacobi sweep; it is only meant for the
//! modest matrix sizes that appear in spectral filtering and in oracle
//! computations (N up to a few hundred), where robustness matters more
//! than speed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Entries below this magnitude are skipped when deciding a vector's sign.
const SIGN_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(values, vectors)` with eigenvalues ascending and eigenvectors
/// in the columns of `vectors`, so `a = vectors * diag(values) * vectors^T`.
/// Each eigenvector is normalized with its first component of magnitude
/// above `SIGN_TOL` made positive, which pins an otherwise arbitrary sign.
pub fn symmetric_eig(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::input(format!(
            "matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::input("matrix must be non-empty"));
    }
    let max_asym = asymmetry(a);
    if max_asym > 1e-9 {
        return Err(Error::input(format!(
            "matrix is not symmetric, max |a_ij - a_ji| = {max_asym:.3e}"
        )));
    }

    let mut work = a.clone();
    // Force exact symmetry so that rotations stay consistent.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (work[[i, j]] + work[[j, i]]);
            work[[i, j]] = v;
            work[[j, i]] = v;
        }
    }
    let mut vecs = Array2::<f64>::eye(n);
    let frob = work.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        let off = off_diagonal_norm(&work);
        if off <= 1e-14 * frob {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = work[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = work[[p, p]];
                let aqq = work[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = work[[k, p]];
                    let akq = work[[k, q]];
                    work[[k, p]] = c * akp - s * akq;
                    work[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = work[[p, k]];
                    let aqk = work[[q, k]];
                    work[[p, k]] = c * apk - s * aqk;
                    work[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vecs[[k, p]];
                    let vkq = vecs[[k, q]];
                    vecs[[k, p]] = c * vkp - s * vkq;
                    vecs[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| work[[i, i]].total_cmp(&work[[j, j]]));

    let mut values = Array1::<f64>::zeros(n);
    let mut sorted = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = work[[src, src]];
        let mut sign = 1.0;
        for k in 0..n {
            let v = vecs[[k, src]];
            if v.abs() > SIGN_TOL {
                sign = v.signum();
                break;
            }
        }
        for k in 0..n {
            sorted[[k, dst]] = sign * vecs[[k, src]];
        }
    }
    Ok((values, sorted))
}

fn asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

/// Dominant-eigenvalue estimate of a symmetric positive semidefinite
/// operator given only its matrix-vector action.
///
/// Runs at most `max_iters` iterations and stops early once the Rayleigh
/// quotient changes by less than `tol` relatively. The start vector is
/// drawn from a fixed-seed generator so the estimate is reproducible.
pub fn power_iteration<F>(apply: F, dim: usize, max_iters: usize, tol: f64, seed: u64) -> f64
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    assert!(dim > 0, "operator dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v /= norm;
    }

    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let w = apply(&v);
        let next = v.dot(&w);
        let wnorm = w.dot(&w).sqrt();
        if wnorm == 0.0 {
            return 0.0;
        }
        v = w / wnorm;
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}
