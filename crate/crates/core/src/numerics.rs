//! Dense matrix kernels shared by every solver.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major:
//! a sample (one column of a data shard) is a contiguous slice.

use nalgebra::DMatrix;

use crate::error::{DbmdError, Result};

pub type Matrix = DMatrix<f64>;

/// Default relative tolerance of [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Entrywise `sign(x) * max(|x| - t, 0)`. Entries with `|x| == t` map to exactly 0.
pub fn soft_threshold(x: &Matrix, t: f64) -> Result<Matrix> {
    let mut out = x.clone();
    soft_threshold_mut(&mut out, t)?;
    Ok(out)
}

pub fn soft_threshold_mut(x: &mut Matrix, t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(DbmdError::invalid(format!("soft threshold must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(());
    }
    x.apply(|v| *v = shrink(*v, t));
    Ok(())
}

#[inline]
pub(crate) fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration.
///
/// The start vector is the normalized all-ones vector, so the estimate is
/// reproducible. Iteration stops once the eigen-residual `||Av - θv||` falls
/// below `tol * θ`, which bounds the distance from `θ` to the spectrum.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    if !a.is_square() {
        return Err(DbmdError::shape("spectral_norm", (a.nrows(), a.nrows()), a.shape()));
    }
    if !(tol > 0.0) {
        return Err(DbmdError::invalid(format!("spectral_norm tol must be > 0, got {tol}")));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut theta = 0.0;
    for _ in 0..SPECTRAL_MAX_ITERS {
        let av = a * &v;
        theta = v.dot(&av);
        let norm = av.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let residual = (&av - &v * theta).norm();
        if residual <= tol * theta.abs() {
            break;
        }
        v = av / norm;
    }
    Ok(theta)
}

pub fn frob_norm(x: &Matrix) -> f64 {
    x.norm()
}

/// `H Hᵀ`, symmetrized so the result is exactly symmetric.
pub fn gram(h: &Matrix) -> Matrix {
    let mut g = h * h.transpose();
    symmetrize(&mut g);
    g
}

pub(crate) fn symmetrize(g: &mut Matrix) {
    let n = g.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let s = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.nrows() {
        return Err(DbmdError::shape("matmul", (a.ncols(), b.ncols()), b.shape()));
    }
    Ok(a * b)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_same_shape("add", a, b)?;
    Ok(a + b)
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    a * s
}

pub fn l1_norm(a: &Matrix) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DbmdError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Cholesky factor of an SPD system matrix `S`, used to evaluate `B S⁻¹`.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    /// Lower factor `L` with `S = L Lᵀ`.
    l: Matrix,
    system: Matrix,
}

impl SpdSolver {
    pub fn new(system: Matrix) -> Result<Self> {
        if !system.is_square() {
            return Err(DbmdError::shape("SpdSolver", (system.nrows(), system.nrows()), system.shape()));
        }
        let chol = nalgebra::Cholesky::new(system.clone())
            .ok_or_else(|| DbmdError::LinearSolve("system matrix is not positive definite".into()))?;
        Ok(SpdSolver { l: chol.l(), system })
    }

    /// Solves `X S = B` for `X` (i.e. `X = B S⁻¹`), with `S` symmetric.
    ///
    /// Substitutes column by column through `Y Lᵀ = B`, then `X L = Y`, so
    /// every step is a contiguous column update.
    pub fn solve_right(&self, b: &Matrix) -> Result<Matrix> {
        let r = self.system.nrows();
        if b.ncols() != r {
            return Err(DbmdError::shape("solve_right", (b.nrows(), r), b.shape()));
        }
        let l = &self.l;
        let m = b.nrows();
        let mut x = b.clone();
        let data = x.as_mut_slice();
        // column j occupies data[j m .. (j + 1) m]
        let axpy = |data: &mut [f64], dst: usize, src: usize, f: f64| {
            let (lo, hi) = data.split_at_mut(dst.max(src) * m);
            let (d, s) = if dst < src { (&mut lo[dst * m..(dst + 1) * m], &hi[..m]) } else { (&mut hi[..m], &lo[src * m..(src + 1) * m]) };
            for (a, b) in d.iter_mut().zip(s) {
                *a -= f * b;
            }
        };
        for j in 0..r {
            for k in 0..j {
                let f = l[(j, k)];
                if f != 0.0 {
                    axpy(data, j, k, f);
                }
            }
            let d = 1.0 / l[(j, j)];
            data[j * m..(j + 1) * m].iter_mut().for_each(|v| *v *= d);
        }
        for j in (0..r).rev() {
            for k in j + 1..r {
                let f = l[(k, j)];
                if f != 0.0 {
                    axpy(data, j, k, f);
                }
            }
            let d = 1.0 / l[(j, j)];
            data[j * m..(j + 1) * m].iter_mut().for_each(|v| *v *= d);
        }
        Ok(x)
    }

    /// `||X S - B||_F / max(||B||_F, 1)`.
    pub fn relative_residual(&self, x: &Matrix, b: &Matrix) -> f64 {
        (x * &self.system - b).norm() / b.norm().max(1.0)
    }
}
