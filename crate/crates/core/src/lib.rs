//! Planning and learning for the collect-or-estimate decision in networked systems.
//!
//! A decision maker watches a network whose data of interest is either the
//! empirical distribution of finite node states or a weighted average of
//! linear node states. At every step it decides whether to pay for a fresh
//! (possibly non-credible) sample of that data or to estimate it from the
//! last credible sample. Everything here works on the planning space
//! `(x, y)`: the last credible data `x` and the number of blanks `y` since.
//!
//! Modules:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`chain`] | state spaces, `M(n)` enumeration, local and empirical-distribution kernels |
//! | [`planning`] | truncated Bellman equation, cost models, estimators, brute-force oracle |
//! | [`learning`] | virtual MDP transition and synchronized Q-learning |
//! | [`linear`] | spectral vectorization, Kalman-like estimator, elapsed-time DP, Riccati scheduling |
//! | [`asymptotics`] | mean-field operator, certainty threshold, Lipschitz scans |
//! | [`simulation`] | closed-loop Monte-Carlo worlds and strategy evaluation |

pub mod asymptotics;
pub mod chain;
mod error;
pub mod learning;
pub mod linear;
pub mod planning;
pub mod simulation;
mod types;

pub use error::{Error, Result};
pub use types::{stream_rng, Action, Observation, PlanningState, SimRng};
