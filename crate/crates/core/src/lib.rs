//! Particle filters for partially observed diffusions: the bootstrap filter,
//! the nudged particle filter (per-particle Feynman-Kac optimal control with
//! Girsanov weight correction), and its variant guided by a variational
//! pseudo-observation path. Ships with a stochastic Lorenz-63 testbed and a
//! Monte Carlo experiment harness.

pub mod bootstrap_pf;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod nudging;
pub mod optimizer;
pub mod sde;
pub mod streams;
pub mod var_npf;
pub mod variational;

pub use error::{FilterError, Result};
