//! Latent population flow estimation from aggregated counts.
//!
//! Hidden transition flows between discrete states are estimated by solving an
//! entropy-regularized multi-marginal transport problem on a tree (a hidden
//! chain with observation leaves), while per-step transport costs are learned
//! by inverse optimal transport in an EM loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cost;
pub mod dense;
pub mod em;
pub mod error;
pub mod eval;
pub mod io;
pub mod par;
pub mod sbp;
pub mod sim;
pub mod sinkhorn;
pub mod tree;

pub use dense::{DenseMatrix, DenseVector, Epsilon};
pub use error::{Error, Result};
pub use par::Exec;
pub use sbp::{SbpConfig, SbpDomain, SbpSolution};
pub use tree::{build_hmm_tree, validate_tree, HmmLayout, ObservationSet, StateSpace, TreeModel};
