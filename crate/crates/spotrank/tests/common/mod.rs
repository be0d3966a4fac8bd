//! Shared helpers for the integration test suites.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spotrank::simulate::CovariancePath;
use spotrank::specmat::SymMatrix;

/// Deterministic generator for a named test stream.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar stochastic-volatility path Sigma(t) = |sigma0 + gamma B'(t)|,
/// reflected at zero, frozen to a piecewise-constant left-endpoint skeleton
/// on n_cells cells. The vol driver B' comes from the supplied generator and
/// is independent of whatever drives the observations.
pub fn reflected_scalar_vol_path(
    sigma0: f64,
    gamma: f64,
    n_cells: usize,
    r: &mut ChaCha8Rng,
) -> CovariancePath {
    let step = (1.0 / n_cells as f64).sqrt();
    let mut level = sigma0;
    let mut values = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        values.push(level.abs());
        let z: f64 = r.sample(rand_distr::StandardNormal);
        level += gamma * step * z;
    }
    CovariancePath::piecewise_constant_flat(1, n_cells, values).unwrap()
}

/// Random symmetric matrix with entries uniform in [-scale, scale].
pub fn random_symmetric(r: &mut ChaCha8Rng, dim: usize, scale: f64) -> SymMatrix {
    SymMatrix::from_fn(dim, |_, _| r.random_range(-scale..scale)).unwrap()
}

/// Random positive semidefinite matrix G'G with G k x d, entries N(0, scale).
pub fn random_psd(r: &mut ChaCha8Rng, dim: usize, rank: usize, scale: f64) -> SymMatrix {
    let g: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = r.sample(rand_distr::StandardNormal);
                    scale * z
                })
                .collect()
        })
        .collect();
    SymMatrix::from_fn(dim, |i, j| (0..rank).map(|k| g[k][i] * g[k][j]).sum()).unwrap()
}

pub fn assert_close(got: f64, want: f64, tol: f64, label: &str) {
    assert!(
        (got - want).abs() <= tol,
        "{label}: got {got}, want {want}, |diff| = {:e} > tol {tol:e}",
        (got - want).abs()
    );
}

pub fn assert_rel_close(got: f64, want: f64, rtol: f64, label: &str) {
    let denom = 1.0_f64.max(want.abs());
    assert!(
        (got - want).abs() <= rtol * denom,
        "{label}: got {got}, want {want}, rel diff {:e} > {rtol:e}",
        (got - want).abs() / denom
    );
}

/// Least-squares slope of y against x.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Empirical quantile by sorting a copy (midpoint-free, lower interpolation).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx]
}
