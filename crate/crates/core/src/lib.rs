//! Reinforcement learning under moral uncertainty.
//!
//! Several moral theories, each with a credence, share control of one agent.
//! Their preferences are aggregated by one of three mechanisms:
//!
//! * [`mec`]: maximize expected choice-worthiness, a credence-weighted
//!   scalarization solved with ordinary SARSA or Q-learning;
//! * [`variance_voting`]: Variance-SARSA, where every theory's action values
//!   are normalized by their expected across-state variance before voting;
//! * [`nash_voting`]: each theory is a PPO sub-agent spending a finite vote
//!   budget each episode.
//!
//! The [`envs`] module provides deterministic trolley-problem gridworlds and
//! their collapsed bandit abstractions, [`oracle`] computes exact answers on
//! those abstractions, and [`sweep`] produces credence × stakes decision
//! boundary grids.

pub mod approx;
pub mod envs;
pub mod exec;
pub mod mec;
pub mod nash_voting;
pub mod oracle;
pub mod seeding;
pub mod sweep;
pub mod theories;
pub mod variance_voting;

pub use envs::{ActionId, Choice, Environment};
pub use exec::Execution;
pub use theories::{CredenceVector, Outcome, TheorySpec, WorthinessTable};
