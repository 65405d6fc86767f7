//! Whittle-index scheduling of `N` users over `M` unreliable channels.
//!
//! A central scheduler assigns channels to users in discrete epochs. Each
//! user carries an age-of-information state with a nondecreasing holding
//! cost; each channel succeeds with an unknown Bernoulli rate and charges a
//! transmission cost. The goal is to minimize the long-run average of
//! holding plus transmission costs subject to one-user-per-channel and
//! one-channel-per-user constraints.
//!
//! The crate is organized around the decomposition of that joint MDP into
//! per-(channel, user) arms:
//!
//! - [`arm`] — the single-arm birth–death MDP: transitions, stage costs,
//!   threshold-policy stationary distributions, and average-cost splits.
//! - [`composite`] — the joint model: admissible assignments, product
//!   transition kernel, aggregate stage cost.
//! - [`exact`] — dense average-cost solvers: Poisson-equation policy
//!   evaluation, policy iteration, optimal-threshold search, and the
//!   coincident-point index oracle.
//! - [`index`] — the closed-form Whittle index, per-(channel, user) index
//!   tables, and UCB augmentation.
//! - [`index_learn`] — two-timescale relative Q-learning of the indices
//!   from observed channel outcomes.
//! - [`policy`] — the scheduling policies: myopic baselines, index-value
//!   and index-channel schedulers, energy-saving refinements.
//! - [`sim`] — the discrete-time environment, channel-rate estimation,
//!   trial runner, and scenario generation.

pub mod arm;
pub mod composite;
pub mod error;
pub mod exact;
pub mod index;
pub mod index_learn;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
