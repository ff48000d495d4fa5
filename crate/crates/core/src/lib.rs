//! Distributed Bayesian matrix decomposition.
//!
//! Column-sharded data `X = [X_1, …, X_C]` is factored as `X_c ≈ W H_c` with
//! a sparse basis `W` shared by all shards and simplex-constrained
//! coefficient blocks `H_c` kept on their workers. The basis is updated by
//! one of three distributed strategies ([`Strategy::Agd`],
//! [`Strategy::Admm`], [`Strategy::Cease`]); coefficient blocks are updated
//! locally. Communication is simulated and counted by [`CommLedger`].

pub mod datagen;
pub mod error;
pub mod eval;
pub mod h_solver;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod runtime;
pub mod w_solvers;

pub use error::{DbmdError, Result};
pub use model::{DataShard, Hyperparams, ModelState};
pub use numerics::Matrix;
pub use runtime::{fit, Cluster, CommLedger, FitReport, RunConfig};
pub use w_solvers::Strategy;
