//! Synthetic data: block-structured bases, Bernoulli or Dirichlet
//! coefficients, Gaussian observation noise.
//!
//! Randomness comes from ChaCha8 keyed by `(seed, stream)`. Streams are laid
//! out as `purpose << 56 | rep << 24 | shard`, so every shard and every
//! repetition draws from its own sequence independent of execution order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{DbmdError, Result};
use crate::model::DataShard;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Coefficients = 1,
    Noise = 2,
    InitBasis = 3,
    InitCoefficients = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey { seed, stream: 0 }
    }

    pub fn stream(seed: u64, purpose: Purpose, shard: usize, rep: u64) -> Self {
        let stream = ((purpose as u64) << 56) | ((rep & 0xFFFF_FFFF) << 24) | (shard as u64 & 0xFF_FFFF);
        RngKey { seed, stream }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for RngKey {
    fn from(seed: u64) -> Self {
        RngKey::new(seed)
    }
}

/// Uniform draw on the open interval (0, 1).
fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normals by the Box–Muller transform; both outputs are used.
pub struct BoxMuller<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> BoxMuller<R> {
    pub fn new(rng: R) -> Self {
        BoxMuller { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = open_unit(&mut self.rng);
        let u2 = open_unit(&mut self.rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Basis with `r` columns of height `a`, each supported on `l` consecutive
/// rows, adjacent supports overlapping on `coh` rows.
///
/// Column `k` (0-based) is nonzero on rows `k(l − coh) .. k(l − coh) + l − 1`
/// (0-based, inclusive); the matrix has `l + (r − 1)(l − coh)` rows.
pub fn gen_basis(a: f64, l: usize, coh: usize, r: usize) -> Result<Matrix> {
    if coh >= l {
        return Err(DbmdError::invalid(format!("coherence {coh} must be < column support {l}")));
    }
    if r == 0 {
        return Err(DbmdError::invalid("rank must be >= 1"));
    }
    let stride = l - coh;
    let m = l + (r - 1) * stride;
    let mut w = Matrix::zeros(m, r);
    for k in 0..r {
        for i in k * stride..k * stride + l {
            w[(i, k)] = a;
        }
    }
    Ok(w)
}

/// Entries drawn from Bernoulli(p); all-zero columns get a one in the last
/// row; columns are then normalized to sum to one.
pub fn gen_h_bernoulli(r: usize, n: usize, p: f64, key: impl Into<RngKey>) -> Result<Matrix> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DbmdError::invalid(format!("Bernoulli p must lie in (0, 1], got {p}")));
    }
    if r == 0 {
        return Err(DbmdError::invalid("rank must be >= 1"));
    }
    let mut rng = key.into().rng();
    let mut h = Matrix::zeros(r, n);
    for mut col in h.column_iter_mut() {
        for v in col.iter_mut() {
            if rng.random::<f64>() < p {
                *v = 1.0;
            }
        }
        if col.sum() == 0.0 {
            col[r - 1] = 1.0;
        }
        let s = col.sum();
        col /= s;
    }
    Ok(h)
}

/// Columns i.i.d. Dirichlet(`alpha0`), via normalized Gamma draws.
pub fn gen_h_dirichlet(r: usize, n: usize, alpha0: &[f64], key: impl Into<RngKey>) -> Result<Matrix> {
    if alpha0.len() != r || r == 0 {
        return Err(DbmdError::invalid(format!("alpha0 has {} entries, rank is {r}", alpha0.len())));
    }
    let gammas = alpha0
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|_| DbmdError::invalid(format!("Dirichlet parameter must be > 0, got {a}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = key.into().rng();
    let mut h = Matrix::zeros(r, n);
    for mut col in h.column_iter_mut() {
        loop {
            for (v, g) in col.iter_mut().zip(&gammas) {
                *v = g.sample(&mut rng);
            }
            let s = col.sum();
            if s > 0.0 {
                col /= s;
                break;
            }
        }
    }
    Ok(h)
}

/// `X_c = W H_c + E_c` with `E_c` i.i.d. `N(0, σ_c²)`.
pub fn gen_observations(w: &Matrix, hs: &[Matrix], sigmas: &[f64], seed: u64) -> Result<Vec<DataShard>> {
    gen_observations_rep(w, hs, sigmas, seed, 0)
}

/// As [`gen_observations`], drawing noise from repetition stream `rep`.
pub fn gen_observations_rep(w: &Matrix, hs: &[Matrix], sigmas: &[f64], seed: u64, rep: u64) -> Result<Vec<DataShard>> {
    if hs.len() != sigmas.len() {
        return Err(DbmdError::invalid(format!("{} noise levels for {} shards", sigmas.len(), hs.len())));
    }
    hs.iter()
        .zip(sigmas)
        .enumerate()
        .map(|(c, (h, &sigma))| {
            if h.nrows() != w.ncols() {
                return Err(DbmdError::shape("gen_observations", (w.ncols(), h.ncols()), h.shape()));
            }
            if !(sigma >= 0.0) {
                return Err(DbmdError::invalid(format!("noise level must be >= 0, got {sigma}")));
            }
            let mut x = w * h;
            if sigma > 0.0 {
                let mut normal = BoxMuller::new(RngKey::stream(seed, Purpose::Noise, c, rep).rng());
                x.apply(|v| *v += sigma * normal.sample());
            }
            Ok(DataShard::new(x))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CoefficientPrior {
    Bernoulli { p: f64 },
    Dirichlet { alpha0: Vec<f64> },
}

/// Full synthetic setup: basis geometry, per-shard sizes and noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub a: f64,
    pub l: usize,
    pub coh: usize,
    pub rank: usize,
    pub shard_sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub coefficients: CoefficientPrior,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Five equal shards of `n_c` samples with `a = 1.5, l = 20, coh = 2`.
    pub fn block_basis(rank: usize, n_c: usize, sigmas: Vec<f64>, coefficients: CoefficientPrior, seed: u64) -> Self {
        SyntheticConfig {
            a: 1.5,
            l: 20,
            coh: 2,
            rank,
            shard_sizes: vec![n_c; sigmas.len()],
            sigmas,
            coefficients,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub w: Matrix,
    pub hs: Vec<Matrix>,
    pub shards: Vec<DataShard>,
}

impl SyntheticData {
    /// Ground-truth cluster labels, shard by shard.
    pub fn labels(&self) -> Vec<usize> {
        self.hs.iter().flat_map(crate::h_solver::assign_clusters).collect()
    }
}

pub fn gen_coefficients(cfg: &SyntheticConfig) -> Result<Vec<Matrix>> {
    cfg.shard_sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let key = RngKey::stream(cfg.seed, Purpose::Coefficients, c, 0);
            match &cfg.coefficients {
                CoefficientPrior::Bernoulli { p } => gen_h_bernoulli(cfg.rank, n, *p, key),
                CoefficientPrior::Dirichlet { alpha0 } => gen_h_dirichlet(cfg.rank, n, alpha0, key),
            }
        })
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.shard_sizes.len() != cfg.sigmas.len() {
        return Err(DbmdError::invalid("one noise level per shard is required"));
    }
    let w = gen_basis(cfg.a, cfg.l, cfg.coh, cfg.rank)?;
    let hs = gen_coefficients(cfg)?;
    let shards = gen_observations(&w, &hs, &cfg.sigmas, cfg.seed)?;
    Ok(SyntheticData { w, hs, shards })
}
