//! Centralized accelerated proximal gradient (FISTA) over summed worker gradients.

use crate::error::{DbmdError, Result};
use crate::numerics::{self, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AgdState {
    /// Latest proximal iterate `W^k`.
    pub w: Matrix,
    /// Search point broadcast to the workers.
    pub y: Matrix,
    pub w_prev: Matrix,
    pub nu: f64,
    pub lipschitz: f64,
}

impl AgdState {
    pub fn new(w0: Matrix, lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0) || !lipschitz.is_finite() {
            return Err(DbmdError::invalid(format!("AGD needs a positive Lipschitz constant, got {lipschitz}")));
        }
        Ok(AgdState {
            y: w0.clone(),
            w_prev: w0.clone(),
            w: w0,
            nu: 1.0,
            lipschitz,
        })
    }

    /// `‖W^k − W^{k−1}‖_F`.
    pub fn last_step(&self) -> f64 {
        (&self.w - &self.w_prev).norm()
    }
}

pub fn next_nu(nu: f64) -> f64 {
    0.5 * (1.0 + (4.0 * nu * nu + 1.0).sqrt())
}

/// One coordinator step given `∇f_c(Y^k)` from every worker, summed in
/// worker order.
pub fn agd_round(state: &AgdState, gradients: &[Matrix], lambda: f64) -> Result<AgdState> {
    let Some(first) = gradients.first() else {
        return Err(DbmdError::invalid("agd_round needs at least one gradient"));
    };
    let mut sum = Matrix::zeros(state.y.nrows(), state.y.ncols());
    for g in gradients {
        numerics::ensure_same_shape("agd_round", &state.y, g)?;
        sum += g;
    }
    debug_assert_eq!(first.shape(), sum.shape());
    let l = state.lipschitz;
    let mut w = &state.y - sum / l;
    numerics::soft_threshold_mut(&mut w, lambda / l)?;
    let nu = next_nu(state.nu);
    let y = &w + (&w - &state.w) * ((state.nu - 1.0) / nu);
    Ok(AgdState {
        w_prev: state.w.clone(),
        w,
        y,
        nu,
        lipschitz: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nu_sequence() {
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert_relative_eq!(next_nu(1.0), golden, max_relative = 1e-15);
        assert!((next_nu(1.61803) - 2.19354).abs() < 1e-4);
        assert_relative_eq!(next_nu(golden), (1.0 + (4.0 * golden * golden + 1.0).sqrt()) / 2.0);
    }

    #[test]
    fn fixed_point_at_optimum() {
        let y = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let state = AgdState::new(y.clone(), 4.0).unwrap();
        let zero = Matrix::zeros(2, 2);
        let next = agd_round(&state, &[zero.clone(), zero], 0.0).unwrap();
        assert_eq!(next.w, y);
        assert_eq!(next.y, y);
    }

    #[test]
    fn step_applies_threshold_and_momentum() {
        let w0 = Matrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let state = AgdState::new(w0, 2.0).unwrap();
        let g = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let s1 = agd_round(&state, &[g.clone()], 0.4).unwrap();
        // Y - g/L = [0.5, -1.5], threshold 0.2 -> [0.3, -1.3]
        assert_relative_eq!(s1.w, Matrix::from_row_slice(1, 2, &[0.3, -1.3]), epsilon = 1e-15);
        // nu_0 = 1 so the first search point carries no momentum
        assert_eq!(s1.y, s1.w);
        let s2 = agd_round(&s1, &[g], 0.4).unwrap();
        let coeff = (s1.nu - 1.0) / s2.nu;
        assert_relative_eq!(s2.y, &s2.w + (&s2.w - &s1.w) * coeff, epsilon = 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let state = AgdState::new(Matrix::zeros(2, 2), 1.0).unwrap();
        assert!(agd_round(&state, &[Matrix::zeros(2, 3)], 0.0).is_err());
        assert!(agd_round(&state, &[], 0.0).is_err());
        assert!(AgdState::new(Matrix::zeros(1, 1), 0.0).is_err());
    }
}
