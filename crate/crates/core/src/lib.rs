//! Finite-horizon Bayesian bandits with delayed feedback.
//!
//! The crate builds posterior-state DAGs from priors, plans per-arm policies
//! through Lagrangian relaxations solved by dynamic programming, rewrites
//! step-level policies into block-structured and well-structured form,
//! combines per-arm policies into a feasible global policy, and evaluates
//! everything either exactly or by seeded Monte-Carlo simulation.

pub mod budgeted;
pub mod error;
pub mod gen;
pub mod instance;
pub mod planner;
pub mod policy;
pub mod prior_dag;
pub mod scheduler;
pub mod sim;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
