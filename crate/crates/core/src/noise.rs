//! Noise-variance estimation and inverse-variance aggregation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Purpose, RngKey};
use crate::error::{DbmdError, Result};
use crate::model::{DataShard, Hyperparams};
use crate::numerics::{self, Matrix};
use crate::runtime::{Cluster, CommLedger, Execution};
use crate::w_solvers::{self, Strategy, WUpdateOptions};

/// Lower bound on estimated variances; keeps weights finite for noiseless shards.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Maximum-likelihood noise variance `‖X_c − W_c H_c‖²_F / (m n_c)`, floored.
pub fn estimate_sigma2(shard: &DataShard, w: &Matrix, h: &Matrix) -> Result<f64> {
    if w.ncols() != h.nrows() || w.nrows() != shard.m() || h.ncols() != shard.n() {
        return Err(DbmdError::shape("estimate_sigma2", (shard.m(), shard.n()), (w.nrows(), h.ncols())));
    }
    let count = (shard.m() * shard.n()) as f64;
    if count == 0.0 {
        return Ok(SIGMA2_FLOOR);
    }
    let s2 = (shard.x() - w * h).norm_squared() / count;
    Ok(s2.max(SIGMA2_FLOOR))
}

pub fn uniform_weights(c: usize) -> Vec<f64> {
    vec![1.0 / c as f64; c]
}

/// `v_c = (1/σ_c²) / Σ_l (1/σ_l²)`.
pub fn inverse_variance_weights(sigma2: &[f64]) -> Result<Vec<f64>> {
    if sigma2.is_empty() {
        return Err(DbmdError::invalid("no variances given"));
    }
    if let Some(bad) = sigma2.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        return Err(DbmdError::invalid(format!("variances must be positive and finite, got {bad}")));
    }
    let total: f64 = sigma2.iter().map(|s| 1.0 / s).sum();
    Ok(sigma2.iter().map(|s| (1.0 / s) / total).collect())
}

/// `Σ_c v_c M_c`, accumulated in list order.
pub fn weighted_sum(mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let Some(first) = mats.first() else {
        return Err(DbmdError::invalid("no matrices to aggregate"));
    };
    if weights.len() != mats.len() {
        return Err(DbmdError::invalid(format!("{} weights for {} matrices", weights.len(), mats.len())));
    }
    let mut acc = Matrix::zeros(first.nrows(), first.ncols());
    for (m, &v) in mats.iter().zip(weights) {
        numerics::ensure_same_shape("weighted_sum", first, m)?;
        acc += m * v;
    }
    Ok(acc)
}

/// Inverse-variance weighted mean of equally shaped matrices.
pub fn weighted_mean(mats: &[Matrix], sigma2: &[f64]) -> Result<Matrix> {
    if mats.is_empty() {
        return Err(DbmdError::invalid("no matrices to aggregate"));
    }
    if sigma2.len() != mats.len() {
        return Err(DbmdError::invalid(format!("{} variances for {} matrices", sigma2.len(), mats.len())));
    }
    weighted_sum(mats, &inverse_variance_weights(sigma2)?)
}

/// Harmonic mean over arithmetic mean of the variances: the variance of the
/// inverse-variance weighted aggregate relative to the plain average.
pub fn variance_ratio_theoretical(sigma2: &[f64]) -> Result<f64> {
    if sigma2.is_empty() {
        return Err(DbmdError::invalid("no variances given"));
    }
    if let Some(bad) = sigma2.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        return Err(DbmdError::invalid(format!("variances must be positive and finite, got {bad}")));
    }
    let c = sigma2.len() as f64;
    let harmonic = c / sigma2.iter().map(|s| 1.0 / s).sum::<f64>();
    let arithmetic = sigma2.iter().sum::<f64>() / c;
    if sigma2.iter().all(|&s| s == sigma2[0]) {
        return Ok(1.0);
    }
    Ok((harmonic / arithmetic).min(1.0))
}

/// `Σ_c v_c² σ_c²`: variance of a weighted average of independent unit-trace
/// estimates with variances `σ_c²`.
pub fn weighted_variance(weights: &[f64], sigma2: &[f64]) -> f64 {
    weights.iter().zip(sigma2).map(|(v, s)| v * v * s).sum()
}

/// Monte-Carlo comparison of the plain and inverse-variance weighted
/// aggregates: block basis, Bernoulli coefficients fixed across repetitions,
/// fresh Gaussian noise in every repetition, no L1 penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceExperiment {
    pub a: f64,
    pub l: usize,
    pub coh: usize,
    pub rank: usize,
    pub n_c: usize,
    pub p: f64,
    /// Noise standard deviations, one per worker.
    pub sigmas: Vec<f64>,
    pub strategy: Strategy,
    pub reps: usize,
    /// Coefficient seed; repetition `i` draws noise from seed `seed + i`.
    pub seed: u64,
    pub rho: f64,
    pub gamma: f64,
    pub w_tol: f64,
    pub max_w_iters: usize,
}

impl VarianceExperiment {
    /// `m = 182, n_c = 100, r = 10`, five workers with `σ = (1, 1, 1, 1, s)`,
    /// `p = 0.1`, 100 repetitions, `ρ = 50`.
    pub fn standard(s: f64, strategy: Strategy) -> Self {
        VarianceExperiment {
            a: 1.5,
            l: 20,
            coh: 2,
            rank: 10,
            n_c: 100,
            p: 0.1,
            sigmas: vec![1.0, 1.0, 1.0, 1.0, s],
            strategy,
            reps: 100,
            seed: 2020,
            rho: 50.0,
            gamma: 1e-3,
            w_tol: 1e-8,
            max_w_iters: 20_000,
        }
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| s * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub theoretical: f64,
    pub empirical: f64,
    pub used_reps: usize,
    /// Repetitions dropped because a solve hit its iteration cap.
    pub excluded_reps: usize,
}

/// Unweighted and weighted solutions of one repetition, or `None` when
/// either solve failed to converge.
pub fn variance_rep(exp: &VarianceExperiment, w_true: &Matrix, hs: &[Matrix], rep: u64) -> Result<Option<(Matrix, Matrix)>> {
    let shards = datagen::gen_observations(w_true, hs, &exp.sigmas, exp.seed.wrapping_add(rep))?;
    let mut hp = Hyperparams::new(exp.rank);
    hp.rho = exp.rho;
    hp.gamma = exp.gamma;
    hp.w_tol = exp.w_tol;
    hp.max_w_iters = exp.max_w_iters;
    let mut w = Matrix::zeros(w_true.nrows(), exp.rank);
    let mut cluster = Cluster::new(shards, hs.to_vec(), &w, Execution::Serial)?;
    let mut ledger = CommLedger::default();
    let opts = WUpdateOptions::default();
    let plain = w_solvers::run_w_update(exp.strategy, &mut cluster, &mut w, &hp, &mut ledger, &opts)?;
    if !plain.converged {
        return Ok(None);
    }
    let w_plain = w.clone();
    let global = w_plain.clone();
    let agd = exp.strategy == Strategy::Agd;
    cluster.map(|wk| {
        let basis = if agd { global.clone() } else { wk.w_local().clone() };
        wk.estimate_sigma2(&basis)
    })?;
    hp.weighted = true;
    let weighted = w_solvers::run_w_update(exp.strategy, &mut cluster, &mut w, &hp, &mut ledger, &opts)?;
    if !weighted.converged {
        return Ok(None);
    }
    Ok(Some((w_plain, w)))
}

/// Summed entrywise sample variances (denominator `n − 1`).
pub fn summed_variance(samples: &[Matrix]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(DbmdError::invalid("at least two samples are needed for a variance"));
    }
    let n = samples.len() as f64;
    let mean = weighted_sum(samples, &uniform_weights(samples.len()))?;
    let ss: f64 = samples.iter().map(|s| (s - &mean).norm_squared()).sum();
    Ok(ss / (n - 1.0))
}

/// `Σ var(W̃) / Σ var(W̄)` over repetitions.
pub fn variance_ratio_from_samples(plain: &[Matrix], weighted: &[Matrix]) -> Result<f64> {
    if plain.len() != weighted.len() {
        return Err(DbmdError::invalid("sample lists differ in length"));
    }
    let denom = summed_variance(plain)?;
    if !(denom > 0.0) {
        return Err(DbmdError::Domain("unweighted estimates have zero variance".into()));
    }
    Ok(summed_variance(weighted)? / denom)
}

/// Fixed coefficient blocks of the experiment.
pub fn variance_coefficients(exp: &VarianceExperiment) -> Result<Vec<Matrix>> {
    (0..exp.sigmas.len())
        .map(|c| datagen::gen_h_bernoulli(exp.rank, exp.n_c, exp.p, RngKey::stream(exp.seed, Purpose::Coefficients, c, 0)))
        .collect()
}

/// Runs all repetitions (in parallel) and compares the empirical ratio with
/// the harmonic-over-arithmetic prediction.
pub fn empirical_variance_ratio(exp: &VarianceExperiment) -> Result<VarianceRatio> {
    if exp.reps < 2 {
        return Err(DbmdError::invalid("at least two repetitions are required"));
    }
    if let Some(bad) = exp.sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(DbmdError::invalid(format!("noise levels must be positive, got {bad}")));
    }
    let w_true = datagen::gen_basis(exp.a, exp.l, exp.coh, exp.rank)?;
    let hs = variance_coefficients(exp)?;
    let results = (0..exp.reps as u64)
        .into_par_iter()
        .map(|rep| variance_rep(exp, &w_true, &hs, rep))
        .collect::<Result<Vec<_>>>()?;
    let mut plain = Vec::new();
    let mut weighted = Vec::new();
    for (a, b) in results.iter().flatten() {
        plain.push(a.clone());
        weighted.push(b.clone());
    }
    let used = plain.len();
    if used < 2 {
        return Err(DbmdError::invalid(format!("only {used} of {} repetitions converged", exp.reps)));
    }
    Ok(VarianceRatio {
        theoretical: variance_ratio_theoretical(&exp.sigma2())?,
        empirical: variance_ratio_from_samples(&plain, &weighted)?,
        used_reps: used,
        excluded_reps: exp.reps - used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub s: f64,
    pub theoretical: f64,
    pub empirical: f64,
    pub used_reps: usize,
    pub excluded_reps: usize,
}

/// Sweeps the noise level of the last worker over `s_values`.
pub fn variance_curve(base: &VarianceExperiment, s_values: &[f64]) -> Result<Vec<VarianceRow>> {
    s_values
        .iter()
        .map(|&s| {
            let mut exp = base.clone();
            if let Some(last) = exp.sigmas.last_mut() {
                *last = s;
            }
            let r = empirical_variance_ratio(&exp)?;
            Ok(VarianceRow {
                s,
                theoretical: r.theoretical,
                empirical: r.empirical,
                used_reps: r.used_reps,
                excluded_reps: r.excluded_reps,
            })
        })
        .collect()
}

pub fn write_variance_csv<W: Write>(out: W, rows: &[VarianceRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| DbmdError::invalid(format!("cannot write CSV row: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}
