//! Model-free stabilizing policy iteration and Q-learning for cooperative
//! optimal output tracking of discrete-time leader-follower networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`matkit`]: vectorization conventions and dense linear-algebra helpers.
//! - [`plant`]: follower/leader models, graph, simulation and CSV logs.
//! - [`observer`]: distributed estimation of the leader.
//! - [`oracle`]: model-based references (Lyapunov, policy iteration, DARE,
//!   regulator equations).
//! - [`regulator`]: basis construction and the iterative regulator solver.
//! - [`offpolicy`]: the off-policy learning pipeline.
//! - [`qlearn`]: the Q-learning pipeline.
//! - [`experiment`]: configuration, orchestration and reports.
//!
//! See the `examples/` directory for runnable walkthroughs.

pub mod error;
pub mod experiment;
pub mod matkit;
pub mod observer;
pub mod offpolicy;
pub mod oracle;
pub mod plant;
pub mod qlearn;
pub mod regulator;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
