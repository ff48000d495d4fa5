//! Simulated coordinator/worker execution.
//!
//! Every [`Worker`] exclusively owns one shard. The coordinator never sees
//! `X_c`; it talks to workers through closures run by [`Cluster::map`], which
//! returns results in ascending worker order so every reduction is
//! deterministic whether workers run serially or on a thread pool.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Purpose, RngKey};
use crate::error::{DbmdError, Result};
use crate::h_solver;
use crate::model::{self, DataShard, Hyperparams, ModelState, ShardState};
use crate::noise;
use crate::numerics::{self, Matrix, SpdSolver};
use crate::w_solvers::{self, Strategy, WUpdateOptions};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DBMD_THREADS";

/// Products of a worker's shard with its coefficient block, computed once per
/// basis update.
#[derive(Debug, Clone)]
pub(crate) struct WorkerCache {
    /// `X_c H_cᵀ`.
    pub(crate) xht: Matrix,
    /// `H_c H_cᵀ`.
    pub(crate) gram: Matrix,
    /// `‖X_c‖²_F`.
    pub(crate) x_sq: f64,
    pub(crate) admm: Option<SpdSolver>,
    pub(crate) cease: Option<SpdSolver>,
    pub(crate) cease_bound: f64,
}

impl WorkerCache {
    /// `f_c(W)` from the cached products.
    pub(crate) fn loss(&self, w: &Matrix) -> f64 {
        0.5 * (self.x_sq - 2.0 * w.dot(&self.xht) + (w * &self.gram).dot(w))
    }

    pub(crate) fn gradient(&self, w: &Matrix) -> Matrix {
        w * &self.gram - &self.xht
    }
}

#[derive(Debug, Clone)]
pub struct Worker {
    id: usize,
    shard: DataShard,
    h: Matrix,
    pub(crate) w_local: Matrix,
    pub(crate) dual: Matrix,
    pub(crate) last_grad: Option<Matrix>,
    pub(crate) cache: Option<WorkerCache>,
    data_reads: usize,
}

impl Worker {
    pub fn new(id: usize, shard: DataShard, h: Matrix, w0: &Matrix) -> Result<Self> {
        if h.ncols() != shard.n() || h.nrows() != w0.ncols() || w0.nrows() != shard.m() {
            return Err(DbmdError::shape("Worker::new", (w0.ncols(), shard.n()), h.shape()));
        }
        Ok(Worker {
            id,
            shard,
            h,
            w_local: w0.clone(),
            dual: Matrix::zeros(w0.nrows(), w0.ncols()),
            last_grad: None,
            cache: None,
            data_reads: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn w_local(&self) -> &Matrix {
        &self.w_local
    }

    pub fn dual(&self) -> &Matrix {
        &self.dual
    }

    pub fn sigma2(&self) -> f64 {
        self.shard.sigma2
    }

    pub fn n(&self) -> usize {
        self.shard.n()
    }

    pub fn m(&self) -> usize {
        self.shard.m()
    }

    /// Number of passes this worker has made over its own shard data.
    pub fn data_reads(&self) -> usize {
        self.data_reads
    }

    fn x(&mut self) -> &Matrix {
        self.data_reads += 1;
        self.shard.x()
    }

    pub(crate) fn set_dual(&mut self, dual: Matrix) {
        self.dual = dual;
    }

    /// Recomputes `X_c H_cᵀ`, `H_c H_cᵀ` and the factorizations the chosen
    /// strategy needs.
    pub(crate) fn refresh_cache(&mut self, strategy: Strategy, hp: &Hyperparams) -> Result<()> {
        let ht = self.h.transpose();
        let x = self.x();
        let xht = x * &ht;
        let x_sq = x.norm_squared();
        let gram = numerics::gram(&self.h);
        let (admm, cease, cease_bound) = match strategy {
            Strategy::Agd => (None, None, 0.0),
            Strategy::Admm => (Some(w_solvers::admm::local_system(&gram, hp.rho)?), None, 0.0),
            Strategy::Cease => {
                let bound = numerics::spectral_norm(&gram, numerics::SPECTRAL_TOL)? + hp.gamma;
                (None, w_solvers::cease::curvature_system(&gram, hp.gamma), bound)
            }
        };
        self.cache = Some(WorkerCache { xht, gram, x_sq, admm, cease, cease_bound });
        Ok(())
    }

    pub(crate) fn cache(&self) -> Result<&WorkerCache> {
        self.cache
            .as_ref()
            .ok_or_else(|| DbmdError::invalid(format!("worker {} has no cached products", self.id)))
    }

    /// Exact `f_c(W)` from the shard.
    pub fn loss(&mut self, w: &Matrix) -> Result<f64> {
        let h = self.h.clone();
        model::loss_fc(w, self.x(), &h)
    }

    pub fn penalty(&self, alpha: &[f64]) -> Result<f64> {
        model::dirichlet_penalty(&self.h, alpha)
    }

    pub fn update_h(&mut self, w: &Matrix, hp: &Hyperparams) -> Result<()> {
        self.data_reads += 1;
        self.h = h_solver::update_h(&self.shard, w, &self.h, hp)?;
        self.cache = None;
        Ok(())
    }

    /// Re-estimates and stores `σ_c²` against `w`.
    pub fn estimate_sigma2(&mut self, w: &Matrix) -> Result<f64> {
        self.data_reads += 1;
        let s2 = noise::estimate_sigma2(&self.shard, w, &self.h)?;
        self.shard.sigma2 = s2;
        Ok(s2)
    }

    pub fn set_sigma2(&mut self, sigma2: f64) -> Result<()> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(DbmdError::invalid(format!("variance must be positive, got {sigma2}")));
        }
        self.shard.sigma2 = sigma2;
        Ok(())
    }

    pub fn into_parts(self) -> (DataShard, ShardState) {
        (
            self.shard,
            ShardState {
                h: self.h,
                w_local: self.w_local,
                dual: self.dual,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Serial,
    /// Thread pool of the given size, or rayon's default when `None`.
    Parallel(Option<usize>),
}

impl Execution {
    /// Parallel, capped by `DBMD_THREADS` when it is set to a positive integer.
    pub fn from_env() -> Self {
        let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
        Execution::Parallel(cap)
    }
}

pub struct Cluster {
    workers: Vec<Worker>,
    execution: Execution,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster").field("workers", &self.workers.len()).field("execution", &self.execution).finish()
    }
}

impl Cluster {
    pub fn new(shards: Vec<DataShard>, hs: Vec<Matrix>, w0: &Matrix, execution: Execution) -> Result<Self> {
        if shards.is_empty() {
            return Err(DbmdError::invalid("at least one shard is required"));
        }
        if shards.len() != hs.len() {
            return Err(DbmdError::invalid(format!("{} coefficient blocks for {} shards", hs.len(), shards.len())));
        }
        let workers = shards
            .into_iter()
            .zip(hs)
            .enumerate()
            .map(|(id, (s, h))| Worker::new(id, s, h, w0))
            .collect::<Result<Vec<_>>>()?;
        let pool = match execution {
            Execution::Parallel(Some(n)) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| DbmdError::invalid(format!("cannot build thread pool: {e}")))?,
            ),
            _ => None,
        };
        Ok(Cluster { workers, execution, pool })
    }

    /// Builds a cluster from a model state, restoring local copies and duals.
    pub fn from_state(shards: Vec<DataShard>, state: &ModelState, execution: Execution) -> Result<Self> {
        let hs = state.shards.iter().map(|s| s.h.clone()).collect();
        let mut cluster = Cluster::new(shards, hs, &state.w, execution)?;
        for (w, s) in cluster.workers.iter_mut().zip(&state.shards) {
            numerics::ensure_same_shape("Cluster::from_state", &state.w, &s.w_local)?;
            numerics::ensure_same_shape("Cluster::from_state", &state.w, &s.dual)?;
            w.w_local = s.w_local.clone();
            w.dual = s.dual.clone();
        }
        Ok(cluster)
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn m(&self) -> usize {
        self.workers[0].m()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.workers.iter().map(Worker::sigma2).collect()
    }

    /// Runs `f` on every worker; results come back in worker order.
    pub fn map<T, F>(&mut self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut Worker) -> Result<T> + Sync + Send,
    {
        let workers = &mut self.workers;
        match (self.execution, &self.pool) {
            (Execution::Serial, _) => workers.iter_mut().map(f).collect(),
            (_, Some(pool)) => pool.install(|| workers.par_iter_mut().map(&f).collect()),
            (_, None) => workers.par_iter_mut().map(&f).collect(),
        }
    }

    pub fn into_state(self, w: Matrix) -> (Vec<DataShard>, ModelState) {
        let (shards, blocks): (Vec<_>, Vec<_>) = self.workers.into_iter().map(Worker::into_parts).unzip();
        (shards, ModelState { w, shards: blocks })
    }
}

/// Entry counts of the messages exchanged between coordinator and workers.
///
/// A broadcast of an `m × r` matrix counts `m r` entries once, regardless of
/// the number of recipients; a collection counts `m r` per reduced payload.
/// This makes one round cost `2mr` (AGD, ADMM) or `4mr` (CEASE).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    /// Basis-update entries sent coordinator to workers.
    pub broadcasts: u64,
    /// Basis-update entries sent workers to coordinator.
    pub collections: u64,
    pub agd_rounds: u64,
    pub admm_rounds: u64,
    pub cease_rounds: u64,
    /// Basis broadcasts outside the update loops (initial basis, refreshes
    /// before the coefficient phase).
    pub basis_syncs: u64,
    /// `r × r` Gram matrices gathered to compute the AGD step size.
    pub setup_entries: u64,
    /// Losses, variances and other scalar reports.
    pub scalar_messages: u64,
    /// Entries moved when each worker's copy of a broadcast is counted
    /// separately.
    pub point_to_point: u64,
}

impl CommLedger {
    pub fn broadcast(&mut self, entries: usize, workers: usize) {
        self.broadcasts += entries as u64;
        self.point_to_point += (entries * workers) as u64;
    }

    pub fn collect(&mut self, entries: usize, workers: usize) {
        self.collections += entries as u64;
        self.point_to_point += (entries * workers) as u64;
    }

    pub fn add_round(&mut self, strategy: Strategy) {
        match strategy {
            Strategy::Agd => self.agd_rounds += 1,
            Strategy::Admm => self.admm_rounds += 1,
            Strategy::Cease => self.cease_rounds += 1,
        }
    }

    pub fn rounds(&self, strategy: Strategy) -> u64 {
        match strategy {
            Strategy::Agd => self.agd_rounds,
            Strategy::Admm => self.admm_rounds,
            Strategy::Cease => self.cease_rounds,
        }
    }

    /// Basis-update traffic, broadcasts plus collections.
    pub fn w_entries(&self) -> u64 {
        self.broadcasts + self.collections
    }

    /// Per-round traffic multiplier: AGD and ADMM move two `m × r` payloads
    /// per round, CEASE four.
    pub fn payloads_per_round(strategy: Strategy) -> u64 {
        match strategy {
            Strategy::Agd | Strategy::Admm => 2,
            Strategy::Cease => 4,
        }
    }

    /// Expected basis-update traffic after `rounds` rounds.
    pub fn expected_entries(strategy: Strategy, rounds: u64, m: usize, r: usize) -> u64 {
        Self::payloads_per_round(strategy) * rounds * (m * r) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Blocks of `⌈n/C⌉` consecutive columns, the last one smaller.
    Contiguous,
    /// Column `j` goes to shard `j mod C`.
    Strided,
}

/// Splits the columns of `x` over `c` shards.
pub fn partition(x: &Matrix, c: usize, scheme: PartitionScheme) -> Result<Vec<DataShard>> {
    let n = x.ncols();
    if c == 0 || c > n {
        return Err(DbmdError::invalid(format!("cannot split {n} columns over {c} shards")));
    }
    let groups = partition_indices(n, c, scheme);
    groups
        .into_iter()
        .map(|cols| {
            if cols.is_empty() {
                return Err(DbmdError::invalid(format!("{c} contiguous blocks leave an empty shard for {n} columns")));
            }
            Ok(DataShard::new(x.select_columns(&cols)))
        })
        .collect()
}

/// Column indices held by each shard under `scheme`, in shard order.
pub fn partition_indices(n: usize, c: usize, scheme: PartitionScheme) -> Vec<Vec<usize>> {
    match scheme {
        PartitionScheme::Contiguous => {
            let size = n.div_ceil(c.max(1));
            (0..c).map(|k| (k * size..((k + 1) * size).min(n)).collect()).collect()
        }
        PartitionScheme::Strided => (0..c).map(|k| (k..n).step_by(c).collect()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Number of workers; must equal the number of shards passed to [`fit`].
    pub workers: usize,
    pub hp: Hyperparams,
    pub execution: Execution,
}

impl RunConfig {
    pub fn new(strategy: Strategy, workers: usize, hp: Hyperparams) -> Self {
        RunConfig {
            strategy,
            workers,
            hp,
            execution: Execution::from_env(),
        }
    }

    pub fn weighted(&self) -> bool {
        self.hp.weighted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// MAP objective with unit noise variances.
    pub objective: f64,
    /// MAP objective with the current variance estimates.
    pub objective_sigma: f64,
    pub w_rounds: usize,
    pub w_converged: bool,
    /// The basis update was discarded because it increased the basis objective.
    pub w_rejected: bool,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub strategy: Strategy,
    pub workers: usize,
    pub weighted: bool,
    pub initial_objective: f64,
    pub rounds: Vec<RoundRecord>,
    pub ledger: CommLedger,
    pub converged: bool,
    pub wall_time_secs: f64,
}

impl FitReport {
    pub const SCHEMA: &'static str = "dbmd/1";

    pub fn objectives(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.objective).collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.rounds.last().map_or(self.initial_objective, |r| r.objective)
    }

    pub fn total_w_rounds(&self) -> usize {
        self.rounds.iter().map(|r| r.w_rounds).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DbmdError::invalid(format!("cannot serialize report: {e}")))
    }
}

/// Starting point: basis entries uniform on [0, 1), coefficient columns
/// Dirichlet(1, …, 1) floored at `ε_h`, each shard on its own stream.
pub fn initial_state(shards: &[DataShard], hp: &Hyperparams) -> Result<ModelState> {
    let Some(first) = shards.first() else {
        return Err(DbmdError::invalid("at least one shard is required"));
    };
    let (m, r) = (first.m(), hp.rank);
    let mut rng = RngKey::stream(hp.seed, Purpose::InitBasis, 0, 0).rng();
    let w = Matrix::from_fn(m, r, |_, _| rand::Rng::random::<f64>(&mut rng));
    let ones = vec![1.0; r];
    let hs = shards
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let mut h = datagen::gen_h_dirichlet(r, s.n(), &ones, RngKey::stream(hp.seed, Purpose::InitCoefficients, c, 0))?;
            for mut col in h.column_iter_mut() {
                h_solver::floor_simplex(col.as_mut_slice(), hp.epsilon_h);
            }
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelState::new(w, hs))
}

/// Splits `x` into `cfg.workers` shards and fits.
pub fn fit_matrix(x: &Matrix, scheme: PartitionScheme, cfg: &RunConfig) -> Result<(ModelState, FitReport)> {
    let shards = partition(x, cfg.workers, scheme)?;
    fit(shards, cfg)
}

pub fn fit(shards: Vec<DataShard>, cfg: &RunConfig) -> Result<(ModelState, FitReport)> {
    let init = initial_state(&shards, &cfg.hp)?;
    fit_from(shards, init, cfg)
}

/// Alternates basis updates, coefficient updates and (when weighted)
/// variance re-estimation, starting from `init`.
pub fn fit_from(shards: Vec<DataShard>, init: ModelState, cfg: &RunConfig) -> Result<(ModelState, FitReport)> {
    let start = Instant::now();
    let hp = &cfg.hp;
    hp.validate()?;
    if shards.len() != cfg.workers {
        return Err(DbmdError::invalid(format!("configured for {} workers, got {} shards", cfg.workers, shards.len())));
    }
    if let Some(bad) = shards.iter().find(|s| s.m() != shards[0].m()) {
        return Err(DbmdError::shape("fit", (shards[0].m(), bad.n()), (bad.m(), bad.n())));
    }
    if init.w.shape() != (shards[0].m(), hp.rank) {
        return Err(DbmdError::shape("fit", (shards[0].m(), hp.rank), init.w.shape()));
    }
    let c = shards.len();
    let (m, r) = init.w.shape();
    let mut cluster = Cluster::from_state(shards, &init, cfg.execution)?;
    let mut w = init.w;
    let mut ledger = CommLedger::default();
    ledger.basis_syncs += 1;
    ledger.point_to_point += (m * r * c) as u64;

    let alpha = hp.alpha.clone();
    let eval = |cluster: &mut Cluster, w: &Matrix, ledger: &mut CommLedger| -> Result<(f64, f64)> {
        let parts = cluster.map(|wk| Ok((wk.loss(w)?, wk.penalty(&alpha)?, wk.sigma2(), wk.m() * wk.n())))?;
        ledger.scalar_messages += 2 * parts.len() as u64;
        let l1 = hp.lambda * numerics::l1_norm(w);
        let mut plain = l1;
        let mut sigma = l1;
        for (fit, pen, s2, count) in parts {
            plain += fit + pen;
            sigma += fit / s2 + 0.5 * count as f64 * s2.ln() + pen;
        }
        Ok((plain, sigma))
    };

    let (initial_objective, _) = eval(&mut cluster, &w, &mut ledger)?;
    check_finite(initial_objective, "initial objective")?;
    let mut prev = initial_objective;
    let mut rounds = Vec::new();
    let mut converged = false;
    let opts = WUpdateOptions::default();

    for round in 0..hp.max_outer {
        let w_before = w.clone();
        let outcome = w_solvers::run_w_update(cfg.strategy, &mut cluster, &mut w, hp, &mut ledger, &opts)?;
        if !numerics::all_finite(&w) {
            return Err(DbmdError::NonFinite { phase: format!("{} basis update, outer round {round}", cfg.strategy) });
        }

        // Keep the basis update only if it did not increase the basis objective.
        let weights = basis_weights(&cluster, hp.weighted && cfg.strategy != Strategy::Agd)?;
        let before = basis_objective(&cluster, &w_before, &weights, hp.lambda)?;
        let after = basis_objective(&cluster, &w, &weights, hp.lambda)?;
        ledger.scalar_messages += 2 * c as u64;
        let rejected = after > before;
        if rejected {
            w = w_before;
        }
        if cfg.strategy == Strategy::Agd || rejected {
            ledger.basis_syncs += 1;
            ledger.point_to_point += (m * r * c) as u64;
        }

        let w_ref = &w;
        cluster.map(|wk| wk.update_h(w_ref, hp))?;
        if cluster.workers().iter().any(|wk| !numerics::all_finite(wk.h())) {
            return Err(DbmdError::NonFinite { phase: format!("coefficient update, outer round {round}") });
        }

        if hp.weighted {
            let use_local = cfg.strategy != Strategy::Agd && !rejected;
            cluster.map(|wk| {
                let basis = if use_local { wk.w_local.clone() } else { w_ref.clone() };
                wk.estimate_sigma2(&basis)
            })?;
            ledger.scalar_messages += c as u64;
        }

        let (objective, objective_sigma) = eval(&mut cluster, &w, &mut ledger)?;
        check_finite(objective, "objective evaluation")?;
        rounds.push(RoundRecord {
            round,
            objective,
            objective_sigma,
            w_rounds: outcome.rounds,
            w_converged: outcome.converged,
            w_rejected: rejected,
            sigma2: cluster.sigma2(),
        });
        let change = (prev - objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = objective;
        if change < hp.outer_tol {
            converged = true;
            break;
        }
    }

    let (_, state) = cluster.into_state(w);
    let report = FitReport {
        schema: FitReport::SCHEMA.to_string(),
        strategy: cfg.strategy,
        workers: c,
        weighted: hp.weighted,
        initial_objective,
        rounds,
        ledger,
        converged,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

fn check_finite(v: f64, phase: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DbmdError::NonFinite { phase: phase.to_string() })
    }
}

/// Per-worker multipliers of `f_c` in the basis objective: all ones, or
/// `C v_c` with inverse-variance weights `v_c`.
fn basis_weights(cluster: &Cluster, weighted: bool) -> Result<Vec<f64>> {
    let c = cluster.len();
    if weighted {
        Ok(noise::inverse_variance_weights(&cluster.sigma2())?.into_iter().map(|v| v * c as f64).collect())
    } else {
        Ok(vec![1.0; c])
    }
}

fn basis_objective(cluster: &Cluster, w: &Matrix, weights: &[f64], lambda: f64) -> Result<f64> {
    let mut total = lambda * numerics::l1_norm(w);
    for (wk, v) in cluster.workers().iter().zip(weights) {
        total += v * wk.cache()?.loss(w);
    }
    Ok(total)
}
