//! In-trajectory inverse reinforcement learning on finite MDPs.
//!
//! The crate learns a reward function and an entropy-regularized policy from
//! the growing prefix of a single ongoing expert trajectory, pre-trains a
//! meta-prior over related tasks, and exposes exact oracles for every
//! quantity the online learner relies on (gradients, occupancies, local
//! regret, contraction and improvement properties).
//!
//! Module map:
//!
//! - [`mdp`]: finite MDPs, rollouts, discounted occupancies, mixing probes.
//! - [`soft`]: soft Bellman operators, soft value iteration, soft policy
//!   evaluation and improvement.
//! - [`reward`]: tabular and linear reward families with exact bounds.
//! - [`online`]: the online learner, its gradient estimators, baselines and
//!   regret instrumentation.
//! - [`meta`]: meta-prior training by implicit differentiation.
//! - [`envs`]: gridworlds, task distributions, expert streams, evaluation.
//! - [`runner`]: config-driven experiments and output artifacts.

pub mod envs;
pub mod error;
pub mod mdp;
pub mod meta;
pub mod online;
pub mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod soft;

mod linalg;
mod optim;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, StartSpec, Trajectory};
pub use policy::TabularPolicy;
pub use reward::{ParamVector, RewardModel};
pub use rng::SeededRng;
