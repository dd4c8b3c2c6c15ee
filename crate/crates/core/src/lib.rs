//! Neural-guided Monte Carlo Tree Search with an adaptable hindsight
//! experience replay (AHER) relabeler.
//!
//! The crate is organised bottom-up:
//!
//! - [`envcore`]: the goal-conditioned single-player environment contract.
//! - [`environments`]: bit-flipping, a kinematic point maze and grammar-based
//!   equation discovery.
//! - [`grammar`]: context-free grammars, leftmost derivations, expressions and
//!   NRMSE fitting.
//! - [`mcts`]: PUCT search, visit-count policies and retained episode trees.
//! - [`model`]: a from-scratch MLP policy/value network with Adam.
//! - [`replay`]: the FIFO replay buffer and the hindsight relabeler.
//! - [`trainer`]: the self-play / relabel / train loop and its metrics.
//! - [`cli`]: configuration files, runs, sweeps and reports.

pub mod cli;
pub mod config;
pub mod envcore;
pub mod environments;
pub mod error;
pub mod grammar;
pub mod mcts;
pub mod model;
pub mod replay;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
