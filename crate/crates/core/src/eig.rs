//! Dense symmetric eigenvalues by cyclic Jacobi rotations.
//!
//! This is the exact-grade oracle the rest of the crate measures itself
//! against: spectral norms of dense operators, circle-contractivity radii
//! and layer Jacobian spectra all reduce to small symmetric eigenproblems.

use crate::error::{NxnError, Result};

/// Symmetric n x n matrix stored row-major.
#[derive(Clone, Debug)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    let v = self.get(i, j);
                    s += v * v;
                }
            }
        }
        s.sqrt()
    }

    fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Eigenvalues of a symmetric matrix, ascending. Runs cyclic Jacobi sweeps
/// until the off-diagonal norm falls below 1e-14 (relative to the matrix
/// scale, so large well-conditioned inputs still terminate).
pub fn sym_eigenvalues(a: &SymMatrix) -> Result<Vec<f64>> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(NxnError::RejectedInput(
            "non-finite entry in symmetric eigenproblem".into(),
        ));
    }
    let n = a.n;
    if n == 0 {
        return Ok(vec![]);
    }
    if n == 1 {
        return Ok(vec![a.get(0, 0)]);
    }
    let mut m = a.clone();
    let tol = 1e-14 * m.frobenius().max(1.0);
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        if m.off_diagonal_norm() < tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-2 / (n as f64) {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/cols p and q.
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eig)
}

/// Generalized eigenvalues of Q v = lambda D v with D = diag(d), d_i > 0,
/// via the similarity D^{-1/2} Q D^{-1/2}. Ascending.
pub fn generalized_eigenvalues(q: &SymMatrix, d: &[f64]) -> Result<Vec<f64>> {
    let n = q.n;
    if d.len() != n {
        return Err(NxnError::dim(n, d.len(), "generalized eigenproblem weights"));
    }
    if d.iter().any(|&x| x <= 0.0) {
        return Err(NxnError::UnsupportedTableau(
            "generalized eigenproblem requires positive weights".into(),
        ));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|&x| 1.0 / x.sqrt()).collect();
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, inv_sqrt[i] * q.get(i, j) * inv_sqrt[j]);
        }
    }
    sym_eigenvalues(&m)
}
