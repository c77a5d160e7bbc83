//! Recommender policies.
//!
//! A [`SlatePolicy`] maps the observable history (slates shown and choices
//! made so far) to a distribution over slates. Fixed mixtures ignore the
//! history, which lets inference marginalize over them exactly.

pub mod lstm;
pub mod ppo;

use std::sync::Arc;

use crate::env::{Item, PrefSpace, Slate};
use crate::error::{Error, Result};
use crate::rng::sample_categorical;

pub trait SlatePolicy: Send + Sync {
    fn id(&self) -> &str;

    /// Weighted slates for the next step given the history so far. Weights
    /// are non-negative and sum to one.
    fn slate_distribution(&self, slates: &[Slate], choices: &[Item]) -> Vec<(f64, Slate)>;

    /// True when [`slate_distribution`](Self::slate_distribution) never looks
    /// at its arguments.
    fn is_history_independent(&self) -> bool {
        false
    }

    fn sample_slate(&self, slates: &[Slate], choices: &[Item], rng: &mut dyn rand::RngCore) -> Slate {
        let mut dist = self.slate_distribution(slates, choices);
        let w: Vec<f64> = dist.iter().map(|(p, _)| *p).collect();
        let i = sample_categorical(&w, rng);
        dist.swap_remove(i).1
    }
}

/// History-independent mixture over a fixed set of slates.
#[derive(Clone, Debug)]
pub struct MixturePolicy {
    id: String,
    components: Arc<Vec<(f64, Slate)>>,
}

impl MixturePolicy {
    pub fn new(id: impl Into<String>, components: Vec<(f64, Slate)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Parameter("mixture policy needs at least one slate".into()));
        }
        let n = components[0].1.len();
        if components.iter().any(|(_, s)| s.len() != n) {
            return Err(Error::Shape("mixture slates differ in length".into()));
        }
        let weights: Vec<f64> = components.iter().map(|(w, _)| *w).collect();
        let weights = Slate::from_weights(weights)?.into_inner();
        let components = weights.into_iter().zip(components.into_iter().map(|(_, s)| s)).collect();
        Ok(Self { id: id.into(), components: Arc::new(components) })
    }

    pub fn constant(id: impl Into<String>, slate: Slate) -> Self {
        Self { id: id.into(), components: Arc::new(vec![(1.0, slate)]) }
    }

    pub fn components(&self) -> &[(f64, Slate)] {
        &self.components
    }
}

impl SlatePolicy for MixturePolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn slate_distribution(&self, _: &[Slate], _: &[Item]) -> Vec<(f64, Slate)> {
        self.components.as_ref().clone()
    }

    fn is_history_independent(&self) -> bool {
        true
    }

    fn sample_slate(&self, _: &[Slate], _: &[Item], rng: &mut dyn rand::RngCore) -> Slate {
        let w: Vec<f64> = self.components.iter().map(|(p, _)| *p).collect();
        self.components[sample_categorical(&w, rng)].1.clone()
    }
}

pub const RANDOM_POLICY_ID: &str = "random";

/// The random recommender: always shows the uniform slate.
pub fn random_policy(space: &PrefSpace) -> MixturePolicy {
    MixturePolicy::constant(RANDOM_POLICY_ID, space.uniform_slate())
}

/// The logging slate set: wrapped normals with means every 10° and std 30° or 60°.
pub fn logging_slate_set(space: &PrefSpace) -> Vec<Slate> {
    let mut out = Vec::with_capacity(72);
    for std in [30.0, 60.0] {
        for k in 0..36 {
            out.push(space.wrapped_gaussian_slate(k as f64 * 10.0, std).expect("valid std"));
        }
    }
    out
}

pub const SLATE_SET_POLICY_ID: &str = "slate_set";
pub const NEAR_RANDOM_POLICY_ID: &str = "near_random";

/// Uniform choice among the logging slate set.
pub fn slate_set_policy(space: &PrefSpace) -> MixturePolicy {
    let set = logging_slate_set(space);
    let w = 1.0 / set.len() as f64;
    MixturePolicy::new(SLATE_SET_POLICY_ID, set.into_iter().map(|s| (w, s)).collect()).expect("non-empty")
}

/// Uniform slate with probability `p_uniform`, otherwise a random slate from the logging set.
pub fn near_random_policy(space: &PrefSpace, p_uniform: f64) -> Result<MixturePolicy> {
    if !(0.0..=1.0).contains(&p_uniform) {
        return Err(Error::Parameter(format!("p_uniform must be in [0, 1], got {p_uniform}")));
    }
    let set = logging_slate_set(space);
    let w = (1.0 - p_uniform) / set.len() as f64;
    let mut comps: Vec<(f64, Slate)> = vec![(p_uniform, space.uniform_slate())];
    comps.extend(set.into_iter().map(|s| (w, s)));
    MixturePolicy::new(NEAR_RANDOM_POLICY_ID, comps)
}

/// The recommender's discrete action set: six wrapped normals 60° apart, std 60°.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    actions: Vec<Slate>,
}

impl ActionSpace {
    pub const N_ACTIONS: usize = 6;

    pub fn new(space: &PrefSpace) -> Self {
        let actions = (0..Self::N_ACTIONS)
            .map(|k| space.wrapped_gaussian_slate(k as f64 * 60.0, 60.0).expect("valid std"))
            .collect();
        Self { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn slate(&self, a: usize) -> &Slate {
        &self.actions[a]
    }

    pub fn slates(&self) -> &[Slate] {
        &self.actions
    }
}

/// A policy that replays a stochastic rule defined by a closure. Mostly for tests.
pub struct FnPolicy<F> {
    id: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&[Slate], &[Item]) -> Vec<(f64, Slate)> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> SlatePolicy for FnPolicy<F>
where
    F: Fn(&[Slate], &[Item]) -> Vec<(f64, Slate)> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn slate_distribution(&self, slates: &[Slate], choices: &[Item]) -> Vec<(f64, Slate)> {
        (self.f)(slates, choices)
    }
}
