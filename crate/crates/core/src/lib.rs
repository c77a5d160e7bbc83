//! Simulation, exact inference, learned dynamics models and shift metrics for
//! studying recommender-induced preference shifts.
//!
//! The pieces, bottom up:
//!
//! - [`env`]: circular preference/content space, slates and engagement.
//! - [`user`]: the ground-truth simulated user.
//! - [`oracle`]: exact inference over a user's preferences given the true dynamics.
//! - [`rollout`]: trajectories, logged datasets and imagined futures.
//! - [`model`]: recurrent sequence models that learn the dynamics from choices alone.
//! - [`metrics`]: engagement under current, initial and natural-shift preferences.
//! - [`episode`]: one recommender/user interaction loop with per-step beliefs.
//! - [`policy`]: fixed and learned recommenders, and the policy-gradient trainer.
//! - [`experiment`]: seeded pipeline stages shared by the CLI and bindings.
//!
//! [`nn`] and [`rng`] hold the small numeric utilities underneath.
// `!(x > 0.0)` is how parameter checks reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod user;

pub use env::{Item, PrefSpace, Slate};
pub use error::{Error, Result};
pub use user::{UserModel, UserParams, UserState};
