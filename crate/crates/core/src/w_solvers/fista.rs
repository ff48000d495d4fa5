//! Proximal gradient solver for `smooth(W) + λ‖W‖₁`.

use crate::error::{DbmdError, Result};
use crate::numerics::{shrink, Matrix};

#[derive(Debug, Clone)]
pub struct FistaOutcome {
    pub w: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Fast iterative shrinkage-thresholding with gradient-based momentum restart.
///
/// `l_bound` must upper-bound the Lipschitz constant of `grad`. Stops when
/// `‖W^{k+1} − W^k‖_F ≤ tol · ‖W0‖_F` (reference 1 when `W0 = 0`) or after
/// `max_iters` iterations.
pub fn fista_prox_solve<G>(mut grad: G, l_bound: f64, lambda: f64, w0: &Matrix, tol: f64, max_iters: usize) -> Result<FistaOutcome>
where
    G: FnMut(&Matrix) -> Matrix,
{
    if !(l_bound > 0.0) || !l_bound.is_finite() {
        return Err(DbmdError::invalid(format!("Lipschitz bound must be > 0, got {l_bound}")));
    }
    if !(lambda >= 0.0) {
        return Err(DbmdError::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let step = 1.0 / l_bound;
    let thresh = lambda * step;
    let reference = match w0.norm() {
        n if n > 0.0 => n,
        _ => 1.0,
    };

    let mut w = w0.clone();
    let mut y = w0.clone();
    let mut t = 1.0f64;
    for it in 1..=max_iters {
        let g = grad(&y);
        let mut next = &y - g * step;
        next.apply(|v| *v = shrink(*v, thresh));

        let t_next = 0.5 * (1.0 + (4.0 * t * t + 1.0).sqrt());
        let delta = &next - &w;
        // restart when the momentum direction opposes the proximal step
        let restart = (&y - &next).dot(&delta) > 0.0;
        if restart {
            t = 1.0;
            y = next.clone();
        } else {
            y = &next + &delta * ((t - 1.0) / t_next);
            t = t_next;
        }
        let step_norm = delta.norm();
        w = next;
        if step_norm <= tol * reference {
            return Ok(FistaOutcome { w, iterations: it, converged: true });
        }
    }
    Ok(FistaOutcome { w, iterations: max_iters, converged: false })
}
