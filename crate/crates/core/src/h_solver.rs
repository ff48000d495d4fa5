//! Coefficient update: each column of `H_c` minimizes
//! `½‖x_j − W h_j‖² − Σ_k α_k ln h_kj` over the probability simplex.
//!
//! Columns are solved independently by exponentiated-gradient (entropic
//! mirror descent) steps with a backtracking line search, so every iterate
//! stays strictly inside the simplex and the objective never increases.

use crate::error::{DbmdError, Result};
use crate::model::{DataShard, Hyperparams};
use crate::numerics::Matrix;

pub const H_MAX_ITERS: usize = 200;
pub const H_REL_TOL: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-8;
const MAX_BACKTRACKS: usize = 60;

/// Per-column quadratic data: `Q = WᵀW`, `p = Wᵀx`, `c = ½‖x‖²`.
struct ColumnProblem<'a> {
    q: &'a Matrix,
    p: Vec<f64>,
    c: f64,
    alpha: &'a [f64],
}

impl ColumnProblem<'_> {
    fn objective(&self, h: &[f64]) -> f64 {
        let r = h.len();
        let mut quad = 0.0;
        for k in 0..r {
            let mut qh = 0.0;
            for l in 0..r {
                qh += self.q[(k, l)] * h[l];
            }
            quad += h[k] * (0.5 * qh - self.p[k]);
        }
        let mut prior = 0.0;
        for k in 0..r {
            if self.alpha[k] != 0.0 {
                prior -= self.alpha[k] * h[k].ln();
            }
        }
        self.c + quad + prior
    }

    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        let r = h.len();
        for k in 0..r {
            let mut qh = 0.0;
            for l in 0..r {
                qh += self.q[(k, l)] * h[l];
            }
            out[k] = qh - self.p[k] - self.alpha[k] / h[k];
        }
    }
}

/// Moves `h` (non-negative, summing to one) onto `{h ≥ eps, Σh = 1}` by
/// pinning small entries at `eps` and rescaling the rest.
pub fn floor_simplex(h: &mut [f64], eps: f64) {
    let r = h.len();
    let mut pinned = vec![false; r];
    loop {
        let mut changed = false;
        for k in 0..r {
            if !pinned[k] && h[k] < eps {
                pinned[k] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass: f64 = (0..r).filter(|&k| !pinned[k]).map(|k| h[k]).sum();
        let target = 1.0 - n_pinned as f64 * eps;
        for k in 0..r {
            if pinned[k] {
                h[k] = eps;
            } else if free_mass > 0.0 {
                h[k] *= target / free_mass;
            }
        }
    }
}

fn mirror_step(h: &[f64], g: &[f64], eta: f64, eps: f64, out: &mut [f64]) {
    let mut max_z = f64::NEG_INFINITY;
    for k in 0..h.len() {
        out[k] = h[k].ln() - eta * g[k];
        max_z = max_z.max(out[k]);
    }
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max_z).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    floor_simplex(out, eps);
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 }).sum()
}

/// Solves one column in place; returns the number of accepted steps.
fn solve_column(prob: &ColumnProblem<'_>, h: &mut [f64], eps: f64) -> usize {
    let r = h.len();
    let mut g = vec![0.0; r];
    let mut cand = vec![0.0; r];
    let mut f = prob.objective(h);
    prob.gradient(h, &mut g);
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut eta = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };
    let mut accepted = 0;
    for _ in 0..H_MAX_ITERS {
        prob.gradient(h, &mut g);
        let mut step_eta = eta * 2.0;
        let mut next_f = None;
        for _ in 0..MAX_BACKTRACKS {
            mirror_step(h, &g, step_eta, eps, &mut cand);
            let fc = prob.objective(&cand);
            let lin: f64 = g.iter().zip(cand.iter().zip(h.iter())).map(|(gk, (c, hk))| gk * (c - hk)).sum();
            let model = f + lin + kl(&cand, h) / step_eta;
            if fc.is_finite() && fc <= f && fc <= model + 1e-12 * f.abs().max(1.0) {
                next_f = Some(fc);
                break;
            }
            step_eta *= 0.5;
        }
        let Some(fc) = next_f else {
            break;
        };
        eta = step_eta;
        h.copy_from_slice(&cand);
        accepted += 1;
        let change = f - fc;
        f = fc;
        if change <= H_REL_TOL * f.abs() {
            break;
        }
    }
    accepted
}

fn check_simplex(h: &Matrix) -> Result<()> {
    for (j, col) in h.column_iter().enumerate() {
        let s: f64 = col.sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || col.iter().any(|&v| v < -SIMPLEX_TOL || !v.is_finite()) {
            return Err(DbmdError::invalid(format!("column {j} of H is not on the simplex (sum {s})")));
        }
    }
    Ok(())
}

/// Updates every column of `H0` for fixed `W`; each column's objective is
/// non-increasing and the result satisfies `h ≥ epsilon_h`, `Σh = 1`.
pub fn update_h(shard: &DataShard, w: &Matrix, h0: &Matrix, hp: &Hyperparams) -> Result<Matrix> {
    let r = w.ncols();
    if h0.nrows() != r || h0.ncols() != shard.n() || w.nrows() != shard.m() {
        return Err(DbmdError::shape("update_h", (r, shard.n()), h0.shape()));
    }
    if hp.alpha.len() != r {
        return Err(DbmdError::invalid(format!("alpha has {} entries, rank is {r}", hp.alpha.len())));
    }
    check_simplex(h0)?;
    let q = w.transpose() * w;
    let wtx = w.transpose() * shard.x();
    let mut h = h0.clone();
    let eps = hp.epsilon_h;
    for (j, mut col) in h.column_iter_mut().enumerate() {
        let prob = ColumnProblem {
            q: &q,
            p: wtx.column(j).iter().copied().collect(),
            c: 0.5 * shard.x().column(j).norm_squared(),
            alpha: &hp.alpha,
        };
        let slice = col.as_mut_slice();
        floor_simplex(slice, eps);
        solve_column(&prob, slice, eps);
    }
    Ok(h)
}

/// Per-column objective values, `½‖x_j − W h_j‖² − Σ_k α_k ln h_kj`.
pub fn column_objectives(shard: &DataShard, w: &Matrix, h: &Matrix, alpha: &[f64]) -> Vec<f64> {
    let resid = shard.x() - w * h;
    (0..h.ncols())
        .map(|j| {
            let prior: f64 = h.column(j).iter().zip(alpha).filter(|(_, &a)| a != 0.0).map(|(&v, &a)| -a * v.ln()).sum();
            0.5 * resid.column(j).norm_squared() + prior
        })
        .collect()
}

/// Index of the largest entry of each column; ties go to the smallest index.
pub fn assign_clusters(h: &Matrix) -> Vec<usize> {
    h.column_iter()
        .map(|col| {
            let mut best = 0;
            for k in 1..col.len() {
                if col[k] > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
