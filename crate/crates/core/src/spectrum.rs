//! Singular-value spectrum of a feature covariance matrix.
//!
//! The covariance of an `N x d` feature matrix is symmetric positive
//! semi-definite, so its singular values equal its eigenvalues; we compute
//! them with a cyclic Jacobi iteration, which is simple, deterministic, and
//! accurate at the `d` values used here.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{degenerate, shape_err, Result};
use crate::real::{real, Real};
use crate::tensor::Tensor;

/// Column-centered covariance matrix (divides by `N - 1`) of `N x d` features.
pub fn covariance_matrix<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(shape_err("covariance", alloc::format!("want (N, d), got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(degenerate("covariance", alloc::format!("need N >= 2 rows, got {n}")));
    }
    let x = features.data();
    let inv_n = T::one() / real::<T>(n as f64);
    let mut mean = vec![T::zero(); d];
    for r in 0..n {
        for c in 0..d {
            mean[c] = mean[c] + x[r * d + c];
        }
    }
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let denom = T::one() / real::<T>((n - 1) as f64);
    let mut cov = vec![T::zero(); d * d];
    for r in 0..n {
        for i in 0..d {
            let xi = x[r * d + i] - mean[i];
            for j in i..d {
                cov[i * d + j] = cov[i * d + j] + xi * (x[r * d + j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(Tensor::from_raw(vec![d, d], cov))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps.
fn jacobi_eigenvalues<T: Real>(matrix: &Tensor<T>) -> Vec<T> {
    let d = matrix.shape()[0];
    let mut a = matrix.data().to_vec();
    let tol = real::<T>(1e-30);
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..d {
            for q in (p + 1)..d {
                off = off + a[p * d + q] * a[p * d + q];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (real::<T>(2.0) * apq);
                // stable tangent of the rotation angle
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// Descending singular values of the covariance of `N x d` features.
///
/// Centers rows by the column mean, forms the `d x d` covariance with the
/// `N - 1` denominator, and returns its spectrum sorted descending. Tiny
/// negative eigenvalues from roundoff are clamped to zero.
pub fn covariance_spectrum<T: Real>(features: &Tensor<T>) -> Result<Vec<T>> {
    let cov = covariance_matrix(features)?;
    let mut eigs = jacobi_eigenvalues(&cov);
    for e in eigs.iter_mut() {
        if *e < T::zero() {
            *e = T::zero();
        }
    }
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    Ok(eigs)
}

/// Number of spectrum entries strictly below `fraction` of the maximum.
/// An all-zero spectrum reports zero collapsed directions.
pub fn near_zero_count<T: Real>(spectrum: &[T], fraction: f64) -> usize {
    let max = spectrum.iter().fold(T::zero(), |m, &v| if v > m { v } else { m });
    let threshold = max * real::<T>(fraction);
    spectrum.iter().filter(|&&v| v < threshold).count()
}
