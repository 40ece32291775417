//! Covariance spectrum against an independent eigen-decomposition route
//! (nalgebra's symmetric eigensolver on the same covariance matrix).

use f2dc_core::rng::{standard_normal, stream_rng};
use f2dc_core::spectrum::{covariance_matrix, covariance_spectrum};
use f2dc_core::Tensor;
use nalgebra::DMatrix;

fn oracle_spectrum(features: &Tensor<f64>) -> Vec<f64> {
    let cov = covariance_matrix(features).unwrap();
    let d = cov.shape()[0];
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let mut eigs: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

#[test]
fn random_features_match_eigen_oracle() {
    let mut rng = stream_rng(0, 2024, 0, 0);
    let features = Tensor::from_fn(vec![100, 8], |_| standard_normal(&mut rng));
    let ours = covariance_spectrum(&features).unwrap();
    let oracle = oracle_spectrum(&features);
    assert_eq!(ours.len(), 8);
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn rank_deficient_features_match_eigen_oracle() {
    // rank-2 data embedded in 6 dimensions
    let mut rng = stream_rng(1, 2025, 0, 0);
    let basis: Vec<(f64, f64)> = (0..40).map(|_| (standard_normal(&mut rng), standard_normal(&mut rng))).collect();
    let features = Tensor::from_fn(vec![40, 6], |i| {
        let (r, c) = (i / 6, i % 6);
        let (u, v) = basis[r];
        match c {
            0 => u,
            1 => v,
            2 => 0.5 * u - v,
            3 => u + v,
            _ => 0.25 * u,
        }
    });
    let ours = covariance_spectrum(&features).unwrap();
    let oracle = oracle_spectrum(&features);
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    // everything beyond the first two directions is numerically zero
    assert!(ours[2].abs() < 1e-10);
}

#[test]
fn wide_dimension_spectrum_matches() {
    let mut rng = stream_rng(2, 2026, 0, 0);
    let features = Tensor::from_fn(vec![64, 32], |_| 0.3 * standard_normal(&mut rng));
    let ours = covariance_spectrum(&features).unwrap();
    let oracle = oracle_spectrum(&features);
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}
