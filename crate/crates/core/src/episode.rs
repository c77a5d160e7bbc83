//! One recommender/user episode with per-step shift bookkeeping.
//!
//! At every step the estimator supplies three beliefs from the history so
//! far: the current preference, the initial preference, and the preference
//! the user would have under the random recommender. The recommender picks a
//! slate from those; the expected engagement of the step is then scored under
//! each belief. The user's choice comes either from the ground-truth user or
//! is imagined from the estimator's own current belief.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{Item, Slate};
use crate::error::{Error, Result};
use crate::metrics::{cross_engagement, StepRewards};
use crate::oracle::{predict_step, BeliefVec, Oracle, TransitionOp};
use crate::policy::SlatePolicy;
use crate::rng::sample_categorical;
use crate::rollout::Trajectory;
use crate::user::{ChoiceModel, UserModel, UserState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBeliefs {
    /// Current preference `u_t`.
    pub filter: BeliefVec,
    /// Initial preference `u_0`.
    pub initial: BeliefVec,
    /// `u_t` under the random recommender.
    pub nps: BeliefVec,
}

/// Source of the three per-step beliefs.
pub trait ShiftEstimator: Send + Sync {
    fn choice_model(&self) -> &ChoiceModel;

    fn start(&self) -> Box<dyn ShiftSession + '_>;
}

pub trait ShiftSession: Send {
    /// Beliefs at the current step given everything observed so far.
    fn beliefs(&mut self) -> Result<StepBeliefs>;

    fn observe(&mut self, slate: &Slate, choice: Item) -> Result<()>;
}

/// Exact beliefs from known dynamics.
#[derive(Clone, Debug)]
pub struct OracleShiftEstimator {
    oracle: Oracle,
    uniform: TransitionOp,
}

impl OracleShiftEstimator {
    pub fn new(oracle: Oracle) -> Result<Self> {
        let uniform = oracle.transition_for_slate(&oracle.space().uniform_slate())?;
        Ok(Self { oracle, uniform })
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }
}

impl ShiftEstimator for OracleShiftEstimator {
    fn choice_model(&self) -> &ChoiceModel {
        self.oracle.choice()
    }

    fn start(&self) -> Box<dyn ShiftSession + '_> {
        Box::new(OracleShiftSession {
            est: self,
            slates: Vec::new(),
            choices: Vec::new(),
            filter: self.oracle.prior().clone(),
        })
    }
}

struct OracleShiftSession<'a> {
    est: &'a OracleShiftEstimator,
    slates: Vec<Slate>,
    choices: Vec<Item>,
    filter: BeliefVec,
}

impl ShiftSession for OracleShiftSession<'_> {
    fn beliefs(&mut self) -> Result<StepBeliefs> {
        let initial = self.est.oracle.smooth_initial(&self.slates, &self.choices)?;
        let mut nps = initial.clone();
        for _ in 0..self.slates.len() {
            nps = predict_step(&nps, &self.est.uniform)?;
        }
        Ok(StepBeliefs { filter: self.filter.clone(), initial, nps })
    }

    fn observe(&mut self, slate: &Slate, choice: Item) -> Result<()> {
        let o = &self.est.oracle;
        let post = o.filter_step(&self.filter, slate, choice)?;
        self.filter = predict_step(&post, &o.slate_ops(slate)?.transition)?;
        self.slates.push(slate.clone());
        self.choices.push(choice);
        Ok(())
    }
}

/// What the recommender sees before choosing a slate.
pub struct Observation<'a> {
    pub t: usize,
    pub slates: &'a [Slate],
    pub choices: &'a [Item],
    pub beliefs: &'a StepBeliefs,
}

pub trait Recommender: Send + Sync {
    fn id(&self) -> &str;

    fn begin(&self) -> Box<dyn RecSession + '_>;
}

pub trait RecSession: Send {
    fn next_slate(&mut self, obs: &Observation<'_>, rng: &mut dyn RngCore) -> Result<Slate>;
}

/// Any history-based slate policy is a recommender that ignores beliefs.
pub struct PolicyRecommender<P>(pub P);

impl<P: SlatePolicy> Recommender for PolicyRecommender<P> {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn begin(&self) -> Box<dyn RecSession + '_> {
        Box::new(PolicySession(&self.0))
    }
}

struct PolicySession<'a, P>(&'a P);

impl<P: SlatePolicy> RecSession for PolicySession<'_, P> {
    fn next_slate(&mut self, obs: &Observation<'_>, rng: &mut dyn RngCore) -> Result<Slate> {
        Ok(self.0.sample_slate(obs.slates, obs.choices, rng))
    }
}

/// Where choices come from.
#[derive(Clone, Copy, Debug)]
pub enum UserSource<'a> {
    /// The ground-truth simulated user.
    GroundTruth(&'a UserModel),
    /// Choices imagined from the estimator's current belief.
    Imagined,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub rewards: Vec<StepRewards>,
    /// Ground-truth preference after the last step.
    pub final_pref: Option<usize>,
}

/// Run one episode of `horizon` steps.
pub fn generate_training_trajectory<R: Rng + ?Sized>(
    source: UserSource<'_>,
    recommender: &mut dyn RecSession,
    estimator: &dyn ShiftEstimator,
    horizon: usize,
    user_id: u64,
    rng: &mut R,
) -> Result<Episode> {
    let cm = estimator.choice_model();
    let mut session = estimator.start();
    let mut state: Option<UserState> = match source {
        UserSource::GroundTruth(u) => Some(u.sample_initial_state(rng)),
        UserSource::Imagined => None,
    };
    let mut slates = Vec::with_capacity(horizon);
    let mut choices = Vec::with_capacity(horizon);
    let mut prefs = Vec::new();
    let mut rewards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let beliefs = session.beliefs()?;
        let obs = Observation { t, slates: &slates, choices: &choices, beliefs: &beliefs };
        let slate = recommender.next_slate(&obs, &mut crate::oracle::RngAdapter(rng))?;
        let p_x = cm.choice_belief(beliefs.filter.probs(), &slate)?;
        let space = cm.space();
        rewards.push(StepRewards {
            eng: cross_engagement(space, &p_x, beliefs.filter.probs())?,
            eng_u0: cross_engagement(space, &p_x, beliefs.initial.probs())?,
            eng_nps: cross_engagement(space, &p_x, beliefs.nps.probs())?,
        });
        let choice = match (&source, state.as_mut()) {
            (UserSource::GroundTruth(u), Some(st)) => {
                prefs.push(st.pref);
                let out = u.step(st, &slate, rng)?;
                *st = out.next_state;
                out.choice
            }
            (UserSource::Imagined, _) => Item(sample_categorical(&p_x, rng)),
            _ => return Err(Error::Config("ground-truth source without a user state".into())),
        };
        session.observe(&slate, choice)?;
        slates.push(slate);
        choices.push(choice);
    }
    let trajectory = Trajectory {
        user_id,
        policy_id: String::new(),
        slates,
        choices,
        gt_prefs: if prefs.is_empty() { None } else { Some(prefs) },
    };
    Ok(Episode { trajectory, rewards, final_pref: state.map(|s| s.pref) })
}
