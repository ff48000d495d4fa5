//! Model state, hyperparameters and the MAP objective.

use serde::{Deserialize, Serialize};

use crate::error::{DbmdError, Result};
use crate::numerics::{self, Matrix};

/// Default interior floor for coefficient entries.
pub const DEFAULT_EPSILON_H: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub rank: usize,
    /// L1 weight on the basis (`1 / λ₀` of the Laplace prior).
    pub lambda: f64,
    /// Shifted Dirichlet exponents, `α₀ - 1`, one per component.
    pub alpha: Vec<f64>,
    /// ADMM penalty.
    pub rho: f64,
    /// CEASE proximal weight.
    pub gamma: f64,
    /// Relative stopping tolerance of the basis update.
    pub w_tol: f64,
    pub max_w_iters: usize,
    /// AGD runs at least this many rounds before the stopping rule applies.
    pub agd_min_iters: usize,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub seed: u64,
    /// Aggregate worker results with inverse-variance weights.
    pub weighted: bool,
    pub epsilon_h: f64,
    /// Inner FISTA tolerance for the CEASE local problem.
    pub fista_tol: f64,
    pub fista_max_iters: usize,
}

impl Hyperparams {
    /// Defaults: ρ = 300, γ = 0.001, stopping tolerance 1e-2 with an AGD
    /// floor of 30 rounds, no priors (λ = 0, α₀ = 1).
    pub fn new(rank: usize) -> Self {
        Hyperparams {
            rank,
            lambda: 0.0,
            alpha: vec![0.0; rank],
            rho: 300.0,
            gamma: 1e-3,
            w_tol: 1e-2,
            max_w_iters: 5_000,
            agd_min_iters: 30,
            max_outer: 200,
            outer_tol: 1e-6,
            seed: 0,
            weighted: false,
            epsilon_h: DEFAULT_EPSILON_H,
            fista_tol: 1e-6,
            fista_max_iters: 500,
        }
    }

    /// Sets the Dirichlet parameter `α₀`; the stored exponent is `α₀ - 1`.
    pub fn with_alpha0(mut self, alpha0: &[f64]) -> Result<Self> {
        if alpha0.len() != self.rank {
            return Err(DbmdError::invalid(format!(
                "alpha0 has {} entries, rank is {}",
                alpha0.len(),
                self.rank
            )));
        }
        if alpha0.iter().any(|&a| !(a >= 1.0)) {
            return Err(DbmdError::invalid("alpha0 entries must be >= 1 so that alpha = alpha0 - 1 >= 0"));
        }
        self.alpha = alpha0.iter().map(|a| a - 1.0).collect();
        Ok(self)
    }

    pub fn with_uniform_alpha0(self, alpha0: f64) -> Result<Self> {
        let v = vec![alpha0; self.rank];
        self.with_alpha0(&v)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank;
        if r == 0 {
            return Err(DbmdError::invalid("rank must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DbmdError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho > 0.0) {
            return Err(DbmdError::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.gamma >= 0.0) {
            return Err(DbmdError::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha.len() != r {
            return Err(DbmdError::invalid(format!("alpha has {} entries, rank is {r}", self.alpha.len())));
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(DbmdError::invalid("alpha entries must be finite and >= 0"));
        }
        if !(self.epsilon_h > 0.0 && self.epsilon_h < 1.0 / r as f64) {
            return Err(DbmdError::invalid(format!(
                "epsilon_h must lie in (0, 1/rank), got {}",
                self.epsilon_h
            )));
        }
        if !(self.w_tol > 0.0) || !(self.outer_tol >= 0.0) || !(self.fista_tol > 0.0) {
            return Err(DbmdError::invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

/// One worker's column block of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    x: Matrix,
    /// Estimated noise variance σ_c².
    pub sigma2: f64,
}

impl DataShard {
    pub fn new(x: Matrix) -> Self {
        DataShard { x, sigma2: 1.0 }
    }

    pub fn with_sigma2(x: Matrix, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(DbmdError::invalid(format!("sigma2 must be > 0, got {sigma2}")));
        }
        Ok(DataShard { x, sigma2 })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn into_matrix(self) -> Matrix {
        self.x
    }
}

/// Per-shard blocks held alongside the global basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardState {
    pub h: Matrix,
    /// Local basis copy (ADMM/CEASE).
    pub w_local: Matrix,
    /// Scaled dual variable (ADMM).
    pub dual: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub w: Matrix,
    pub shards: Vec<ShardState>,
}

impl ModelState {
    /// Builds a state from a basis and coefficient blocks; local copies start
    /// at `w` and duals at zero.
    pub fn new(w: Matrix, hs: Vec<Matrix>) -> Self {
        let shards = hs
            .into_iter()
            .map(|h| ShardState {
                h,
                w_local: w.clone(),
                dual: Matrix::zeros(w.nrows(), w.ncols()),
            })
            .collect();
        ModelState { w, shards }
    }

    pub fn h_blocks(&self) -> Vec<&Matrix> {
        self.shards.iter().map(|s| &s.h).collect()
    }
}

/// `f_c(W) = ½‖X_c − W H_c‖²_F`.
pub fn loss_fc(w: &Matrix, x: &Matrix, h: &Matrix) -> Result<f64> {
    check_factor_shapes("loss_fc", w, x, h)?;
    Ok(0.5 * (x - w * h).norm_squared())
}

/// `∇f_c(W) = (W H_c − X_c) H_cᵀ`.
pub fn grad_fc(w: &Matrix, shard: &DataShard, h: &Matrix) -> Result<Matrix> {
    check_factor_shapes("grad_fc", w, shard.x(), h)?;
    Ok((w * h - shard.x()) * h.transpose())
}

/// Negative log prior of one coefficient block, `−Σ α_k ln h_kj`.
pub fn dirichlet_penalty(h: &Matrix, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != h.nrows() {
        return Err(DbmdError::invalid(format!("alpha has {} entries, H has {} rows", alpha.len(), h.nrows())));
    }
    let mut total = 0.0;
    for col in h.column_iter() {
        for (k, &v) in col.iter().enumerate() {
            if alpha[k] == 0.0 {
                continue;
            }
            if !(v > 0.0) {
                return Err(DbmdError::Domain(format!("coefficient entry {v} is not strictly positive")));
            }
            total -= alpha[k] * v.ln();
        }
    }
    Ok(total)
}

/// MAP objective.
///
/// With `use_sigma` the quadratic terms are weighted by `1/(2σ_c²)` and the
/// `m n_c ln σ_c` normalizer is added; otherwise all `σ_c = 1`.
pub fn objective_full(state: &ModelState, shards: &[DataShard], hp: &Hyperparams, use_sigma: bool) -> Result<f64> {
    if state.shards.len() != shards.len() {
        return Err(DbmdError::invalid(format!(
            "state has {} coefficient blocks for {} shards",
            state.shards.len(),
            shards.len()
        )));
    }
    for s in &state.shards {
        if s.h.iter().any(|&v| !(v > 0.0)) {
            return Err(DbmdError::Domain("coefficient entries must be strictly positive".into()));
        }
    }
    let mut total = hp.lambda * numerics::l1_norm(&state.w);
    for (shard, blk) in shards.iter().zip(&state.shards) {
        let fit = loss_fc(&state.w, shard.x(), &blk.h)?;
        if use_sigma {
            let s2 = shard.sigma2;
            total += fit / s2 + (shard.m() * shard.n()) as f64 * 0.5 * s2.ln();
        } else {
            total += fit;
        }
        total += dirichlet_penalty(&blk.h, &hp.alpha)?;
    }
    Ok(total)
}

/// Basis subproblem objective `Σ_c f_c(W) + λ‖W‖₁`.
pub fn w_objective(w: &Matrix, shards: &[DataShard], hs: &[&Matrix], lambda: f64) -> Result<f64> {
    let mut total = lambda * numerics::l1_norm(w);
    for (shard, h) in shards.iter().zip(hs) {
        total += loss_fc(w, shard.x(), h)?;
    }
    Ok(total)
}

/// `L_f = ‖Σ_c H_c H_cᵀ‖₂`.
pub fn lipschitz_f(hs: &[&Matrix]) -> Result<f64> {
    let Some(first) = hs.first() else {
        return Err(DbmdError::invalid("lipschitz_f needs at least one block"));
    };
    let r = first.nrows();
    let mut sum = Matrix::zeros(r, r);
    for h in hs {
        if h.nrows() != r {
            return Err(DbmdError::shape("lipschitz_f", (r, h.ncols()), h.shape()));
        }
        sum += numerics::gram(h);
    }
    lipschitz_of_gram(&sum)
}

pub(crate) fn lipschitz_of_gram(g: &Matrix) -> Result<f64> {
    numerics::spectral_norm(g, numerics::SPECTRAL_TOL)
}

fn check_factor_shapes(op: &'static str, w: &Matrix, x: &Matrix, h: &Matrix) -> Result<()> {
    if w.ncols() != h.nrows() {
        return Err(DbmdError::shape(op, (w.nrows(), h.nrows()), w.shape()));
    }
    if w.nrows() != x.nrows() || h.ncols() != x.ncols() {
        return Err(DbmdError::shape(op, (w.nrows(), h.ncols()), x.shape()));
    }
    Ok(())
}
