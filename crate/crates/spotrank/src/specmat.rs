//! Dense symmetric-matrix routines for small dimensions: eigendecomposition
//! with ordered spectra, partial traces, and matrix norms.
//!
//! Dimensions stay small (d <= ~20) in every caller, so the eigensolver is a
//! cyclic Jacobi rotation scheme: slower than tridiagonalization but with high
//! relative accuracy for small eigenvalues, which the downstream test
//! statistics depend on.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// relative tolerance for accepting a nearly-symmetric input
pub const SYMMETRY_RTOL: f64 = 1e-12;
/// eigenvalues above this (absolute) floor certify a matrix as non-PSD
pub const PSD_TOL: f64 = 1e-10;
/// off-diagonal Frobenius threshold for Jacobi, relative to the matrix norm
const JACOBI_RTOL: f64 = 1e-13;
/// hard cap on Jacobi sweeps; small matrices converge in well under ten
const MAX_SWEEPS: usize = 50;

/// Symmetric d x d matrix with finite entries, stored dense row-major.
///
/// Construction rejects non-finite entries and asymmetry beyond a relative
/// 1e-12 tolerance, then symmetrizes exactly via (S + S')/2 so later
/// arithmetic never sees a stray asymmetric ulp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Build from row-major entries; `data.len()` must equal `dim * dim`.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("matrix dimension must be at least 1"));
        }
        if data.len() != dim * dim {
            return Err(Error::input(format!(
                "expected {} entries for a {dim} x {dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::input("matrix entries must be finite"));
        }
        let scale = 1.0 + data.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let mut data = data;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::input(format!(
                        "matrix is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {:e}",
                        (a - b).abs()
                    )));
                }
                let s = 0.5 * (a + b);
                data[i * dim + j] = s;
                data[j * dim + i] = s;
            }
        }
        Ok(SymMatrix { dim, data })
    }

    /// Build from data that is already exactly symmetric (e.g. an accumulated
    /// Gram sum where both triangles were written from the same products).
    pub(crate) fn from_raw_symmetric(dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * dim);
        debug_assert!((0..dim).all(|i| (0..dim).all(|j| data[i * dim + j] == data[j * dim + i])));
        SymMatrix { dim, data }
    }

    /// Build entry-wise from `f(i, j)`; `f` is only called for `j >= i`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Self::new(dim, data)
    }

    pub fn diag(entries: &[f64]) -> Result<Self> {
        let dim = entries.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &v) in entries.iter().enumerate() {
            data[i * dim + i] = v;
        }
        Self::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SymMatrix { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix { dim, data: vec![0.0; dim * dim] }
    }

    /// Outer product v v'.
    pub fn dyad(v: &[f64]) -> Self {
        let dim = v.len();
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                data[i * dim + j] = v[i] * v[j];
            }
        }
        SymMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn add(&self, rhs: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        SymMatrix { dim: self.dim, data }
    }

    pub fn sub(&self, rhs: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        SymMatrix { dim: self.dim, data }
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        let data = self.data.iter().map(|a| c * a).collect();
        SymMatrix { dim: self.dim, data }
    }

    /// Matrix square S * S (symmetric since S is).
    pub fn square(&self) -> SymMatrix {
        let d = self.dim;
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.data[i * d + k] * self.data[k * d + j];
                }
                data[i * d + j] = acc;
                data[j * d + i] = acc;
            }
        }
        SymMatrix { dim: d, data }
    }

    /// Matrix-vector product S x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.data[i * d + j] * x[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// Eigendecomposition of a symmetric matrix: descending eigenvalues paired
/// with orthonormal eigenvector columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrum {
    dim: usize,
    /// eigenvalues sorted descending
    pub eigenvalues: Vec<f64>,
    /// row-major d x d orthogonal matrix; column j belongs to eigenvalues[j]
    pub eigenvectors: Vec<f64>,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Eigenvector column j as a vector.
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.eigenvectors[i * self.dim + j]).collect()
    }

    /// max |V'V - I|, used by tests to check orthonormality.
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += self.eigenvectors[i * d + a] * self.eigenvectors[i * d + b];
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }

    /// V diag(lambda) V', used by tests to check the factorization.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.dim;
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.eigenvalues[k]
                        * self.eigenvectors[i * d + k]
                        * self.eigenvectors[j * d + k];
                }
                data[i * d + j] = acc;
                data[j * d + i] = acc;
            }
        }
        SymMatrix { dim: d, data }
    }
}

/// Full eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm falls below
/// 1e-13 * ||S||_F, with a hard cap of 50 sweeps. Eigenvalues are returned in
/// descending order with their eigenvector columns; ties keep the stable
/// order produced by the rotation sequence. Deterministic for equal inputs.
pub fn sym_eigen(s: &SymMatrix) -> Spectrum {
    let d = s.dim;
    let mut a = s.data.clone();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    let norm_f = s.frobenius_norm();
    let threshold = JACOBI_RTOL * norm_f;
    if norm_f > 0.0 {
        for _sweep in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += 2.0 * a[p * d + q] * a[p * d + q];
                }
            }
            if off.sqrt() <= threshold {
                break;
            }
            for p in 0..(d - 1) {
                for q in (p + 1)..d {
                    rotate(&mut a, &mut v, d, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps the rotation-sequence order on ties
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&k| a[k * d + k]).collect();
    let mut eigenvectors = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..d {
            eigenvectors[i * d + new_col] = v[i * d + old_col];
        }
    }
    Spectrum { dim: d, eigenvalues, eigenvectors }
}

/// one Jacobi rotation zeroing a[p][q], accumulated into v
fn rotate(a: &mut [f64], v: &mut [f64], d: usize, p: usize, q: usize) {
    let apq = a[p * d + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * d + p];
    let aqq = a[q * d + q];
    let theta = 0.5 * (aqq - app) / apq;
    // smaller root of t^2 + 2 t theta - 1 = 0, for a rotation angle <= pi/4
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    a[p * d + p] = app - t * apq;
    a[q * d + q] = aqq + t * apq;
    a[p * d + q] = 0.0;
    a[q * d + p] = 0.0;
    for i in 0..d {
        if i != p && i != q {
            let aip = a[i * d + p];
            let aiq = a[i * d + q];
            a[i * d + p] = aip - s * (aiq + tau * aip);
            a[p * d + i] = a[i * d + p];
            a[i * d + q] = aiq + s * (aip - tau * aiq);
            a[q * d + i] = a[i * d + q];
        }
    }
    for i in 0..d {
        let vip = v[i * d + p];
        let viq = v[i * d + q];
        v[i * d + p] = vip - s * (viq + tau * vip);
        v[i * d + q] = viq + s * (vip - tau * viq);
    }
}

/// Sum of the eigenvalues below the top r: sum_{j > r} lambda_j(S).
///
/// `r` may range from 0 (full trace) to d-1.
pub fn partial_trace_gt(s: &SymMatrix, r: usize) -> Result<f64> {
    if r >= s.dim {
        return Err(Error::input(format!(
            "partial trace index r={r} out of range for dimension {}",
            s.dim
        )));
    }
    let spec = sym_eigen(s);
    Ok(spec.eigenvalues[r..].iter().sum())
}

/// Spectral norm max_j |lambda_j(S)| of a symmetric matrix.
pub fn spectral_norm(s: &SymMatrix) -> f64 {
    let spec = sym_eigen(s);
    spec.eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Symmetric square root of a positive semidefinite matrix.
///
/// Fails with a model error if any eigenvalue is below -1e-10; tiny negative
/// eigenvalues above that floor are clipped to zero before taking the root.
pub fn psd_sqrt(s: &SymMatrix) -> Result<SymMatrix> {
    let spec = sym_eigen(s);
    if spec.eigenvalues.iter().any(|&l| l < -PSD_TOL) {
        return Err(Error::model(format!(
            "matrix is not positive semidefinite: min eigenvalue {:e}",
            spec.eigenvalues.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let d = s.dim;
    let roots: Vec<f64> = spec.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += roots[k] * spec.eigenvectors[i * d + k] * spec.eigenvectors[j * d + k];
            }
            data[i * d + j] = acc;
            data[j * d + i] = acc;
        }
    }
    Ok(SymMatrix { dim: d, data })
}
