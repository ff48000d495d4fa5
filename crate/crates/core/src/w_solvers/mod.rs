//! Distributed strategies for the basis subproblem
//! `min_W Σ_c ½‖X_c − W H_c‖²_F + λ‖W‖₁` with the coefficient blocks fixed.

pub mod admm;
pub mod agd;
pub mod cease;
pub mod fista;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DbmdError, Result};
use crate::model::{DataShard, Hyperparams, ModelState};
use crate::noise;
use crate::numerics::{self, Matrix};
use crate::runtime::{Cluster, CommLedger, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Agd,
    Admm,
    Cease,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Agd, Strategy::Admm, Strategy::Cease];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Agd => "agd",
            Strategy::Admm => "admm",
            Strategy::Cease => "cease",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = DbmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agd" => Ok(Strategy::Agd),
            "admm" => Ok(Strategy::Admm),
            "cease" => Ok(Strategy::Cease),
            other => Err(DbmdError::invalid(format!("unknown solver '{other}' (expected agd, admm or cease)"))),
        }
    }
}

/// Diagnostics collected during a basis update. Neither option adds traffic
/// to the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WUpdateOptions {
    /// Record the basis objective at every iterate.
    pub record_objective: bool,
    /// Keep every iterate.
    pub record_iterates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WUpdateOutcome {
    pub rounds: usize,
    pub converged: bool,
    pub objectives: Vec<f64>,
    pub iterates: Vec<Matrix>,
}

/// Runs `strategy` on `cluster` from `w` until
/// `‖W^{k+1} − W^k‖_F ≤ w_tol · ‖W⁰‖_F` (reference 1 when `W⁰ = 0`); AGD
/// additionally runs at least `agd_min_iters` rounds. Hitting `max_w_iters`
/// returns with `converged = false`.
pub fn run_w_update(
    strategy: Strategy,
    cluster: &mut Cluster,
    w: &mut Matrix,
    hp: &Hyperparams,
    ledger: &mut CommLedger,
    opts: &WUpdateOptions,
) -> Result<WUpdateOutcome> {
    hp.validate()?;
    if w.shape() != (cluster.m(), hp.rank) {
        return Err(DbmdError::shape("run_w_update", (cluster.m(), hp.rank), w.shape()));
    }
    cluster.map(|wk| wk.refresh_cache(strategy, hp))?;
    let w0_norm = numerics::frob_norm(w);
    let reference = if w0_norm > 0.0 { w0_norm } else { 1.0 };
    let mut trace = Trace::new(*opts, hp.lambda);
    let out = match strategy {
        Strategy::Agd => run_agd(cluster, w, hp, ledger, reference, &mut trace)?,
        Strategy::Admm => run_admm(cluster, w, hp, ledger, reference, &mut trace)?,
        Strategy::Cease => run_cease(cluster, w, hp, ledger, reference, &mut trace)?,
    };
    Ok(WUpdateOutcome {
        rounds: out.0,
        converged: out.1,
        objectives: trace.objectives,
        iterates: trace.iterates,
    })
}

/// Basis update on a standalone state: builds a serial cluster over copies
/// of `shards`, runs [`run_w_update`] and returns the updated state.
pub fn run_w_update_on(
    strategy: Strategy,
    state: &ModelState,
    shards: &[DataShard],
    hp: &Hyperparams,
    ledger: &mut CommLedger,
) -> Result<(ModelState, WUpdateOutcome)> {
    let mut cluster = Cluster::from_state(shards.to_vec(), state, Execution::Serial)?;
    let mut w = state.w.clone();
    let outcome = run_w_update(strategy, &mut cluster, &mut w, hp, ledger, &WUpdateOptions::default())?;
    let (_, new_state) = cluster.into_state(w);
    Ok((new_state, outcome))
}

struct Trace {
    opts: WUpdateOptions,
    lambda: f64,
    objectives: Vec<f64>,
    iterates: Vec<Matrix>,
}

impl Trace {
    fn new(opts: WUpdateOptions, lambda: f64) -> Self {
        Trace { opts, lambda, objectives: Vec::new(), iterates: Vec::new() }
    }

    fn record(&mut self, cluster: &Cluster, w: &Matrix) -> Result<()> {
        if self.opts.record_objective {
            let mut total = self.lambda * numerics::l1_norm(w);
            for wk in cluster.workers() {
                total += wk.cache()?.loss(w);
            }
            self.objectives.push(total);
        }
        if self.opts.record_iterates {
            self.iterates.push(w.clone());
        }
        Ok(())
    }
}

fn aggregation_weights(cluster: &Cluster, weighted: bool) -> Result<Vec<f64>> {
    if weighted {
        noise::inverse_variance_weights(&cluster.sigma2())
    } else {
        Ok(noise::uniform_weights(cluster.len()))
    }
}

fn run_agd(
    cluster: &mut Cluster,
    w: &mut Matrix,
    hp: &Hyperparams,
    ledger: &mut CommLedger,
    reference: f64,
    trace: &mut Trace,
) -> Result<(usize, bool)> {
    let (m, r) = w.shape();
    let c = cluster.len();
    let grams = cluster.map(|wk| Ok(wk.cache()?.gram.clone()))?;
    ledger.setup_entries += (r * r * c) as u64;
    let mut total = Matrix::zeros(r, r);
    for g in &grams {
        total += g;
    }
    let lipschitz = crate::model::lipschitz_of_gram(&total)?;
    let mut state = agd::AgdState::new(w.clone(), lipschitz)?;
    let mut converged = false;
    let mut rounds = 0;
    while rounds < hp.max_w_iters {
        let y = &state.y;
        ledger.broadcast(m * r, c);
        let grads = cluster.map(|wk| Ok(wk.cache()?.gradient(y)))?;
        ledger.collect(m * r, c);
        ledger.add_round(Strategy::Agd);
        state = agd::agd_round(&state, &grads, hp.lambda)?;
        rounds += 1;
        trace.record(cluster, &state.w)?;
        if rounds >= hp.agd_min_iters && state.last_step() <= hp.w_tol * reference {
            converged = true;
            break;
        }
    }
    *w = state.w;
    Ok((rounds, converged))
}

fn run_admm(
    cluster: &mut Cluster,
    w: &mut Matrix,
    hp: &Hyperparams,
    ledger: &mut CommLedger,
    reference: f64,
    trace: &mut Trace,
) -> Result<(usize, bool)> {
    let (m, r) = w.shape();
    let c = cluster.len();
    let rho = hp.rho;
    let weights = aggregation_weights(cluster, hp.weighted)?;
    let mut converged = false;
    let mut rounds = 0;
    while rounds < hp.max_w_iters {
        let current = &*w;
        let offsets = cluster.map(|wk| {
            let wc = {
                let cache = wk.cache()?;
                let system = cache
                    .admm
                    .as_ref()
                    .ok_or_else(|| DbmdError::invalid("worker cache lacks the ADMM system"))?;
                admm::admm_local_w_cached(&cache.xht, system, &wk.dual, current, rho)?
            };
            let offset = &wc - &wk.dual / rho;
            wk.w_local = wc;
            Ok(offset)
        })?;
        ledger.collect(m * r, c);
        let next = admm::admm_consensus(&offsets, &weights, rho, hp.lambda)?;
        ledger.broadcast(m * r, c);
        ledger.add_round(Strategy::Admm);
        let next_ref = &next;
        cluster.map(|wk| {
            let dual = admm::admm_dual_update(&wk.dual, next_ref, &wk.w_local, rho)?;
            wk.set_dual(dual);
            Ok(())
        })?;
        let step = (&next - &*w).norm();
        *w = next;
        rounds += 1;
        trace.record(cluster, w)?;
        if step <= hp.w_tol * reference {
            converged = true;
            break;
        }
    }
    Ok((rounds, converged))
}

fn run_cease(
    cluster: &mut Cluster,
    w: &mut Matrix,
    hp: &Hyperparams,
    ledger: &mut CommLedger,
    reference: f64,
    trace: &mut Trace,
) -> Result<(usize, bool)> {
    let (m, r) = w.shape();
    let c = cluster.len();
    let local_lambda = hp.lambda / c as f64;
    let sigma2 = cluster.sigma2();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < hp.max_w_iters {
        let current = &*w;
        let grads = cluster.map(|wk| {
            let g = wk.cache()?.gradient(current);
            wk.last_grad = Some(g.clone());
            Ok(g)
        })?;
        ledger.collect(m * r, c);
        let global = cease::cease_grad_aggregate(&grads, &sigma2, hp.weighted)?;
        ledger.broadcast(m * r, c);
        let global_ref = &global;
        let locals = cluster.map(|wk| {
            let wc = {
                let cache = wk.cache()?;
                let local = cease::CeaseLocal {
                    xht: &cache.xht,
                    gram: &cache.gram,
                    l_bound: cache.cease_bound,
                    system: cache.cease.as_ref(),
                };
                let lg = wk.last_grad.as_ref().ok_or_else(|| DbmdError::invalid("missing local gradient"))?;
                cease::cease_local_cached(
                    &local,
                    current,
                    lg,
                    global_ref,
                    hp.gamma,
                    local_lambda,
                    hp.fista_tol,
                    hp.fista_max_iters,
                )?
            };
            wk.w_local = wc.clone();
            Ok(wc)
        })?;
        ledger.collect(m * r, c);
        let next = cease::cease_aggregate(&locals, &sigma2, hp.weighted)?;
        ledger.broadcast(m * r, c);
        ledger.add_round(Strategy::Cease);
        let step = (&next - &*w).norm();
        *w = next;
        rounds += 1;
        trace.record(cluster, w)?;
        if step <= hp.w_tol * reference {
            converged = true;
            break;
        }
    }
    Ok((rounds, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, c: usize, m: usize, r: usize, n: usize) -> (Vec<DataShard>, Vec<Matrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(m, r, |_, _| rng.random::<f64>());
        let mut shards = Vec::new();
        let mut hs = Vec::new();
        for _ in 0..c {
            let mut h = Matrix::from_fn(r, n, |_, _| rng.random::<f64>() + 0.05);
            for mut col in h.column_iter_mut() {
                let s = col.sum();
                col /= s;
            }
            let x = &w * &h + Matrix::from_fn(m, n, |_, _| 0.1 * (rng.random::<f64>() - 0.5));
            shards.push(DataShard::new(x));
            hs.push(h);
        }
        (shards, hs)
    }

    fn least_squares(shards: &[DataShard], hs: &[Matrix]) -> Matrix {
        let r = hs[0].nrows();
        let mut g = Matrix::zeros(r, r);
        let mut b = Matrix::zeros(shards[0].m(), r);
        for (s, h) in shards.iter().zip(hs) {
            g += h * h.transpose();
            b += s.x() * h.transpose();
        }
        (g.cholesky().unwrap().solve(&b.transpose())).transpose()
    }

    fn tight(rank: usize) -> Hyperparams {
        let mut hp = Hyperparams::new(rank);
        hp.w_tol = 1e-10;
        hp.max_w_iters = 100_000;
        hp.fista_tol = 1e-12;
        hp.fista_max_iters = 20_000;
        hp
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("ADMM".parse::<Strategy>().unwrap(), Strategy::Admm);
        assert_eq!(Strategy::Cease.to_string(), "cease");
        assert!("sgd".parse::<Strategy>().is_err());
    }

    #[test]
    fn optimal_start_is_kept() {
        let (shards, hs) = instance(1, 1, 6, 2, 15);
        let w_star = least_squares(&shards, &hs);
        for strategy in Strategy::ALL {
            let hp = Hyperparams::new(2);
            let mut ledger = CommLedger::default();
            let state = ModelState::new(w_star.clone(), hs.clone());
            let (out, outcome) = run_w_update_on(strategy, &state, &shards, &hp, &mut ledger).unwrap();
            let expected = if strategy == Strategy::Agd { hp.agd_min_iters } else { 1 };
            assert_eq!(outcome.rounds, expected, "{strategy}");
            assert!((&out.w - &w_star).amax() < 1e-10, "{strategy}");
        }
    }

    #[test]
    fn optimal_start_with_matching_duals() {
        let (shards, hs) = instance(2, 3, 5, 2, 12);
        let w_star = least_squares(&shards, &hs);
        let mut state = ModelState::new(w_star.clone(), hs.clone());
        for (blk, (s, h)) in state.shards.iter_mut().zip(shards.iter().zip(&hs)) {
            blk.dual = model::grad_fc(&w_star, s, h).unwrap();
        }
        let mut ledger = CommLedger::default();
        let (out, outcome) = run_w_update_on(Strategy::Admm, &state, &shards, &Hyperparams::new(2), &mut ledger).unwrap();
        assert_eq!(outcome.rounds, 1);
        assert!((&out.w - &w_star).amax() < 1e-10);
    }

    #[test]
    fn all_strategies_reach_least_squares() {
        let (shards, hs) = instance(3, 4, 8, 3, 20);
        let w_star = least_squares(&shards, &hs);
        let hs_ref: Vec<&Matrix> = hs.iter().collect();
        let best = model::w_objective(&w_star, &shards, &hs_ref, 0.0).unwrap();
        for strategy in Strategy::ALL {
            let state = ModelState::new(Matrix::zeros(8, 3), hs.clone());
            let mut ledger = CommLedger::default();
            let (out, outcome) = run_w_update_on(strategy, &state, &shards, &tight(3), &mut ledger).unwrap();
            assert!(outcome.converged, "{strategy}");
            let obj = model::w_objective(&out.w, &shards, &hs_ref, 0.0).unwrap();
            assert!((obj - best).abs() <= 1e-8 * best, "{strategy}: {obj} vs {best}");
            assert_eq!(
                ledger.w_entries(),
                CommLedger::expected_entries(strategy, outcome.rounds as u64, 8, 3)
            );
        }
    }

    #[test]
    fn max_iterations_flag() {
        let (shards, hs) = instance(4, 2, 6, 2, 10);
        let mut hp = Hyperparams::new(2);
        hp.w_tol = 1e-14;
        hp.max_w_iters = 3;
        hp.agd_min_iters = 1;
        for strategy in Strategy::ALL {
            let state = ModelState::new(Matrix::from_element(6, 2, 0.3), hs.clone());
            let mut ledger = CommLedger::default();
            let (_, outcome) = run_w_update_on(strategy, &state, &shards, &hp, &mut ledger).unwrap();
            assert_eq!(outcome.rounds, 3);
            assert!(!outcome.converged);
            assert_eq!(ledger.rounds(strategy), 3);
        }
    }

    #[test]
    fn trace_records_each_round() {
        let (shards, hs) = instance(5, 2, 6, 2, 10);
        let state = ModelState::new(Matrix::zeros(6, 2), hs);
        let mut cluster = Cluster::from_state(shards, &state, Execution::Serial).unwrap();
        let mut w = state.w.clone();
        let opts = WUpdateOptions { record_objective: true, record_iterates: true };
        let mut ledger = CommLedger::default();
        let out = run_w_update(Strategy::Cease, &mut cluster, &mut w, &Hyperparams::new(2), &mut ledger, &opts).unwrap();
        assert_eq!(out.objectives.len(), out.rounds);
        assert_eq!(out.iterates.len(), out.rounds);
        assert_eq!(out.iterates.last().unwrap(), &w);
    }
}
