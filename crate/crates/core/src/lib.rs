//! Solver and simulator for finite-horizon risk-sensitive zero-sum games on
//! piecewise deterministic Markov decision processes (PDMDPs).
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: problem instances (state space with flow, action sets,
//!   signed rate kernel, costs) and the JSON model document loader.
//! - [`matrix_game`]: exact zero-sum matrix games via a dense simplex.
//! - [`shapley`]: backward solution of the multiplicative optimality
//!   equation, Picard iteration of the integral operator, policy evaluation
//!   and one-sided best responses.
//! - [`simulate`]: thinning-based trajectory simulation and Monte Carlo
//!   estimation of the exponential cost functional.
//! - [`approx`]: truncation ladders for nonnegative and signed costs.
//! - [`verify`]: standing-assumption checks, value bounds, exploitability,
//!   the fine-grid oracle and the contraction check.
//! - [`io`]: CSV/JSON artifacts.
//!
//! Values are kept on the multiplicative scale
//! `phi(t, x) = E exp(lambda * (int c + g))`; the risk value
//! (certainty equivalent) is `ln(phi) / lambda`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod error;
pub mod io;
pub mod matrix_game;
pub mod model;
pub mod numfmt;
pub mod shapley;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
