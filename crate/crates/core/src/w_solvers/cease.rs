//! Communication-efficient surrogate estimation: every worker minimizes its
//! gradient-enhanced local loss, the coordinator averages the solutions.
//!
//! The global loss is the worker average `(1/C) Σ_c f_c`, so the coordinator
//! averages gradients and the L1 weight applied locally is `λ / C`. With
//! these scalings the fixed point coincides with the minimizer of
//! `Σ_c f_c(W) + λ‖W‖₁`.

use crate::error::{DbmdError, Result};
use crate::model::{DataShard, Hyperparams};
use crate::noise;
use crate::numerics::{self, Matrix, SpdSolver};

use super::fista::fista_prox_solve;

#[derive(Debug, Clone, PartialEq)]
pub struct CeaseState {
    pub w: Matrix,
    pub w_local: Vec<Matrix>,
    pub global_grad: Matrix,
}

impl CeaseState {
    pub fn new(w0: Matrix, workers: usize) -> Self {
        CeaseState {
            w_local: vec![w0.clone(); workers],
            global_grad: Matrix::zeros(w0.nrows(), w0.ncols()),
            w: w0,
        }
    }
}

/// Local curvature data of one worker, fixed during a basis update.
#[derive(Debug, Clone)]
pub struct CeaseLocal<'a> {
    pub xht: &'a Matrix,
    pub gram: &'a Matrix,
    /// `σ_max(H_c H_cᵀ) + γ`.
    pub l_bound: f64,
    /// Factor of `H_c H_cᵀ + γ I`, used for the closed form when `λ = 0`.
    pub system: Option<&'a SpdSolver>,
}

/// Minimizes
/// `f_c(W) − ⟨∇f_c(W^k) − ∇f(W^k), W⟩ + (γ/2)‖W − W^k‖² + λ‖W‖₁`.
pub fn cease_local_cached(
    local: &CeaseLocal<'_>,
    w_k: &Matrix,
    local_grad: &Matrix,
    global_grad: &Matrix,
    gamma: f64,
    lambda: f64,
    fista_tol: f64,
    fista_max_iters: usize,
) -> Result<Matrix> {
    numerics::ensure_same_shape("cease_local", w_k, local_grad)?;
    numerics::ensure_same_shape("cease_local", w_k, global_grad)?;
    numerics::ensure_same_shape("cease_local", w_k, local.xht)?;
    if !(gamma >= 0.0) {
        return Err(DbmdError::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    // linear part of the smooth objective: X_c H_cᵀ + ∇f_c(W^k) − ∇f(W^k) + γ W^k
    let linear = local.xht + local_grad - global_grad + w_k * gamma;
    if lambda == 0.0 {
        if let Some(system) = local.system {
            return system.solve_right(&linear);
        }
    }
    let gram = local.gram;
    let grad = |w: &Matrix| w * gram + w * gamma - &linear;
    let out = fista_prox_solve(grad, local.l_bound, lambda, w_k, fista_tol, fista_max_iters)?;
    Ok(out.w)
}

/// Uncached form: builds `X_c H_cᵀ`, the Gram matrix and the bound from the shard.
#[allow(clippy::too_many_arguments)]
pub fn cease_local(
    shard: &DataShard,
    h: &Matrix,
    w_k: &Matrix,
    local_grad: &Matrix,
    global_grad: &Matrix,
    gamma: f64,
    lambda: f64,
    hp: &Hyperparams,
) -> Result<Matrix> {
    if h.ncols() != shard.n() || w_k.nrows() != shard.m() || w_k.ncols() != h.nrows() {
        return Err(DbmdError::shape("cease_local", (shard.m(), h.nrows()), w_k.shape()));
    }
    let xht = shard.x() * h.transpose();
    let gram = numerics::gram(h);
    let system = curvature_system(&gram, gamma);
    let l_bound = numerics::spectral_norm(&gram, numerics::SPECTRAL_TOL)? + gamma;
    let local = CeaseLocal { xht: &xht, gram: &gram, l_bound, system: system.as_ref() };
    cease_local_cached(&local, w_k, local_grad, global_grad, gamma, lambda, hp.fista_tol, hp.fista_max_iters)
}

/// Factor of `H_c H_cᵀ + γ I` when it is positive definite.
pub fn curvature_system(gram: &Matrix, gamma: f64) -> Option<SpdSolver> {
    let r = gram.nrows();
    SpdSolver::new(gram + Matrix::identity(r, r) * gamma).ok()
}

pub fn cease_aggregate(w_local: &[Matrix], sigma2: &[f64], weighted: bool) -> Result<Matrix> {
    aggregate(w_local, sigma2, weighted)
}

pub fn cease_grad_aggregate(grads: &[Matrix], sigma2: &[f64], weighted: bool) -> Result<Matrix> {
    aggregate(grads, sigma2, weighted)
}

fn aggregate(mats: &[Matrix], sigma2: &[f64], weighted: bool) -> Result<Matrix> {
    if mats.is_empty() {
        return Err(DbmdError::invalid("CEASE aggregation needs at least one worker"));
    }
    if weighted {
        noise::weighted_mean(mats, sigma2)
    } else {
        noise::weighted_sum(mats, &noise::uniform_weights(mats.len()))
    }
}
