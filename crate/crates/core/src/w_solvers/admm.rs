//! Consensus ADMM: closed-form local solves on the workers, soft-thresholded
//! averaging on the coordinator.

use crate::error::{DbmdError, Result};
use crate::model::DataShard;
use crate::noise;
use crate::numerics::{self, Matrix, SpdSolver};

const SOLVE_RESIDUAL_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub w: Matrix,
    pub w_local: Vec<Matrix>,
    pub dual: Vec<Matrix>,
}

impl AdmmState {
    pub fn new(w0: Matrix, workers: usize) -> Self {
        let zero = Matrix::zeros(w0.nrows(), w0.ncols());
        AdmmState {
            w_local: vec![w0.clone(); workers],
            dual: vec![zero; workers],
            w: w0,
        }
    }
}

/// System matrix `I_r + H_c H_cᵀ / ρ`, factored once per basis update.
pub fn local_system(gram: &Matrix, rho: f64) -> Result<SpdSolver> {
    if !(rho > 0.0) {
        return Err(DbmdError::invalid(format!("rho must be > 0, got {rho}")));
    }
    let r = gram.nrows();
    SpdSolver::new(Matrix::identity(r, r) + gram / rho)
}

/// `W_c = ((X_c H_cᵀ + U_c)/ρ + W)(I_r + H_c H_cᵀ/ρ)⁻¹` from precomputed
/// `X_c H_cᵀ` and the factored system.
pub fn admm_local_w_cached(xht: &Matrix, system: &SpdSolver, dual: &Matrix, w: &Matrix, rho: f64) -> Result<Matrix> {
    numerics::ensure_same_shape("admm_local_w", xht, dual)?;
    numerics::ensure_same_shape("admm_local_w", xht, w)?;
    let rhs = (xht + dual) / rho + w;
    let wc = system.solve_right(&rhs)?;
    let res = system.relative_residual(&wc, &rhs);
    if !(res <= SOLVE_RESIDUAL_LIMIT) {
        return Err(DbmdError::LinearSolve(format!("local ADMM solve residual {res:e} exceeds {SOLVE_RESIDUAL_LIMIT:e}")));
    }
    Ok(wc)
}

pub fn admm_local_w(shard: &DataShard, h: &Matrix, dual: &Matrix, w: &Matrix, rho: f64) -> Result<Matrix> {
    if h.ncols() != shard.n() || w.nrows() != shard.m() || w.ncols() != h.nrows() {
        return Err(DbmdError::shape("admm_local_w", (shard.m(), h.nrows()), w.shape()));
    }
    let xht = shard.x() * h.transpose();
    let system = local_system(&numerics::gram(h), rho)?;
    admm_local_w_cached(&xht, &system, dual, w, rho)
}

/// Coordinator step from the per-worker offsets `W_c − U_c/ρ`:
/// `W = S_{λ/(Cρ)}(Σ_c v_c (W_c − U_c/ρ))`.
pub fn admm_consensus(offsets: &[Matrix], weights: &[f64], rho: f64, lambda: f64) -> Result<Matrix> {
    if offsets.is_empty() {
        return Err(DbmdError::invalid("ADMM aggregation needs at least one worker"));
    }
    let mut w = noise::weighted_sum(offsets, weights)?;
    let c = offsets.len() as f64;
    numerics::soft_threshold_mut(&mut w, lambda / (c * rho))?;
    Ok(w)
}

/// `W = S_{λ/(Cρ)}(mean(W_c) − mean(U_c)/ρ)`, with inverse-variance means
/// when `sigma2` is given.
pub fn admm_aggregate(w_local: &[Matrix], dual: &[Matrix], rho: f64, lambda: f64, sigma2: Option<&[f64]>) -> Result<Matrix> {
    if w_local.is_empty() || w_local.len() != dual.len() {
        return Err(DbmdError::invalid("ADMM aggregation needs equal, non-empty W_c and U_c lists"));
    }
    let weights = match sigma2 {
        Some(s) => noise::inverse_variance_weights(s)?,
        None => noise::uniform_weights(w_local.len()),
    };
    let offsets = w_local
        .iter()
        .zip(dual)
        .map(|(wc, u)| {
            numerics::ensure_same_shape("admm_aggregate", wc, u)?;
            Ok(wc - u / rho)
        })
        .collect::<Result<Vec<_>>>()?;
    admm_consensus(&offsets, &weights, rho, lambda)
}

/// `U_c + ρ (W − W_c)`.
pub fn admm_dual_update(dual: &Matrix, w: &Matrix, w_local: &Matrix, rho: f64) -> Result<Matrix> {
    numerics::ensure_same_shape("admm_dual_update", dual, w)?;
    numerics::ensure_same_shape("admm_dual_update", dual, w_local)?;
    Ok(dual + (w - w_local) * rho)
}
