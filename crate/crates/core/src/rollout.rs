//! Trajectories, logged datasets, and Monte-Carlo imagination of futures.
//!
//! [`simulate_future`] rolls a belief predictor forward under a policy: at
//! each step it asks the predictor for the next preference belief, samples a
//! slate from the policy and an imagined choice from the induced choice
//! distribution, and feeds both back as if observed. [`simulate_counterfactual`]
//! first recovers a belief over the initial preference, then runs the same
//! loop from an empty history with a predictor conditioned on that belief.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{normalize, Item, Slate};
use crate::error::{Error, Result};
use crate::oracle::{BeliefVec, Oracle};
use crate::policy::{near_random_policy, slate_set_policy, SlatePolicy};
use crate::rng::{sample_categorical, stream};
use crate::user::{ChoiceModel, UserModel, UserState};

/// One user's logged interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: u64,
    pub policy_id: String,
    pub slates: Vec<Slate>,
    pub choices: Vec<Item>,
    /// Preference at each step, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_prefs: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.slates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slates.is_empty()
    }

    pub fn validate(&self, n_bins: usize) -> Result<()> {
        if self.choices.len() != self.slates.len() {
            return Err(Error::Shape(format!(
                "trajectory {} has {} slates but {} choices",
                self.user_id,
                self.slates.len(),
                self.choices.len()
            )));
        }
        if let Some(p) = &self.gt_prefs {
            if p.len() != self.slates.len() {
                return Err(Error::Shape(format!("trajectory {} has {} preferences", self.user_id, p.len())));
            }
            if let Some(&bad) = p.iter().find(|&&u| u >= n_bins) {
                return Err(Error::BinOutOfRange { bin: bad, n_bins });
            }
        }
        for s in &self.slates {
            if s.len() != n_bins {
                return Err(Error::Shape(format!("slate of length {} for {n_bins} bins", s.len())));
            }
            s.validate()?;
        }
        if let Some(x) = self.choices.iter().find(|x| x.0 >= n_bins) {
            return Err(Error::BinOutOfRange { bin: x.0, n_bins });
        }
        Ok(())
    }
}

/// Logged trajectories; the first `n_train` form the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub n_train: usize,
}

impl Dataset {
    pub fn train(&self) -> &[Trajectory] {
        &self.trajectories[..self.n_train]
    }

    pub fn validation(&self) -> &[Trajectory] {
        &self.trajectories[self.n_train..]
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.trajectories)
    }

    pub fn read_jsonl(path: &Path, train_fraction: f64) -> Result<Self> {
        let trajectories = read_jsonl(path)?;
        let n_train = split_point(trajectories.len(), train_fraction)?;
        Ok(Self { trajectories, n_train })
    }
}

fn split_point(n: usize, train_fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Parameter(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    Ok((n as f64 * train_fraction).round() as usize)
}

pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub horizon: usize,
    /// How often the near-random logging policy shows the uniform slate.
    pub p_uniform: f64,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_traj: 10_000, horizon: 10, p_uniform: 0.8, train_fraction: 0.75 }
    }
}

/// Roll the ground-truth user under a slate policy.
pub fn simulate_user<R: Rng + ?Sized>(
    user: &UserModel,
    policy: &dyn SlatePolicy,
    horizon: usize,
    user_id: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let state = user.sample_initial_state(rng);
    simulate_user_from(user, policy, state, horizon, user_id, rng)
}

/// Like [`simulate_user`] but from a given starting state.
pub fn simulate_user_from<R: Rng + ?Sized>(
    user: &UserModel,
    policy: &dyn SlatePolicy,
    mut state: UserState,
    horizon: usize,
    user_id: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut slates = Vec::with_capacity(horizon);
    let mut choices = Vec::with_capacity(horizon);
    let mut prefs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let slate = policy.sample_slate(&slates, &choices, &mut crate::oracle::RngAdapter(rng));
        prefs.push(state.pref);
        let out = user.step(&state, &slate, rng)?;
        slates.push(slate);
        choices.push(out.choice);
        state = out.next_state;
    }
    Ok(Trajectory { user_id, policy_id: policy.id().to_string(), slates, choices, gt_prefs: Some(prefs) })
}

/// Cohort of independent users under one policy, one seeded stream per user.
pub fn simulate_cohort(
    user: &UserModel,
    policy: &dyn SlatePolicy,
    n_users: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n_users)
        .into_par_iter()
        .map(|i| simulate_user(user, policy, horizon, i as u64, &mut stream(seed, &[i as u64])))
        .collect()
}

/// Logged dataset: even-indexed users see the uniform-over-slate-set policy,
/// odd-indexed users the near-random one, so both splits are balanced.
pub fn generate_dataset(user: &UserModel, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let space = user.space();
    let a = slate_set_policy(space);
    let b = near_random_policy(space, cfg.p_uniform)?;
    let trajectories = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let policy: &dyn SlatePolicy = if i % 2 == 0 { &a } else { &b };
            simulate_user(user, policy, cfg.horizon, i as u64, &mut stream(seed, &[i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_train = split_point(trajectories.len(), cfg.train_fraction)?;
    Ok(Dataset { trajectories, n_train })
}

/// Something that turns an observed history into a belief over the next preference.
pub trait BeliefPredictor: Send + Sync {
    /// The choice rule used to imagine choices from beliefs.
    fn choice_model(&self) -> &ChoiceModel;

    fn session(&self) -> Box<dyn PredictorSession + '_>;
}

/// Incremental view of one history.
pub trait PredictorSession: Send {
    /// Belief over the preference at the next step.
    fn belief(&self) -> BeliefVec;

    /// Append a step. `None` marks an unobserved (masked) choice.
    fn observe(&mut self, slate: &Slate, choice: Option<Item>) -> Result<()>;
}

/// Exact filtering as a predictor.
impl BeliefPredictor for Oracle {
    fn choice_model(&self) -> &ChoiceModel {
        self.choice()
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        Box::new(OracleSession { oracle: self, belief: self.prior().clone() })
    }
}

struct OracleSession<'a> {
    oracle: &'a Oracle,
    belief: BeliefVec,
}

impl PredictorSession for OracleSession<'_> {
    fn belief(&self) -> BeliefVec {
        self.belief.clone()
    }

    fn observe(&mut self, slate: &Slate, choice: Option<Item>) -> Result<()> {
        let filtered = match choice {
            Some(x) => self.oracle.filter_step(&self.belief, slate, x)?,
            None => self.belief.clone(),
        };
        let ops = self.oracle.slate_ops(slate)?;
        self.belief = crate::oracle::predict_step(&filtered, &ops.transition)?;
        Ok(())
    }
}

/// Recovers a belief over a user's initial preference from its history.
pub trait InitialEstimator: Send + Sync {
    fn initial_belief(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec>;
}

impl InitialEstimator for Oracle {
    fn initial_belief(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec> {
        self.smooth_initial(slates, choices)
    }
}

/// Builds a predictor whose empty-history belief is a given initial belief.
pub trait ConditionedPredictor: Send + Sync {
    fn conditioned(&self, init: BeliefVec) -> Result<Box<dyn BeliefPredictor + '_>>;
}

impl ConditionedPredictor for Oracle {
    fn conditioned(&self, init: BeliefVec) -> Result<Box<dyn BeliefPredictor + '_>> {
        Ok(Box::new(self.with_initial_belief(init)?))
    }
}

/// Averaged beliefs (steps `L..=H`) and imagined-choice distributions (steps `L..H`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutReport {
    pub beliefs: Vec<BeliefVec>,
    pub choices: Vec<Vec<f64>>,
}

/// Imagine `n` futures of a history up to step `horizon` under `policy`.
pub fn simulate_future<R: Rng + ?Sized>(
    slates: &[Slate],
    choices: &[Item],
    policy: &dyn SlatePolicy,
    predictor: &dyn BeliefPredictor,
    horizon: usize,
    n: usize,
    rng: &mut R,
) -> Result<RolloutReport> {
    if slates.len() != choices.len() {
        return Err(Error::Shape("history slates and choices differ in length".into()));
    }
    if horizon < slates.len() {
        return Err(Error::Parameter(format!("horizon {horizon} precedes a {}-step history", slates.len())));
    }
    if n == 0 {
        return Err(Error::Parameter("need at least one simulation".into()));
    }
    let cm = predictor.choice_model();
    let bins = cm.space().n_bins();
    let steps = horizon - slates.len();
    let mut beliefs = vec![vec![0.0; bins]; steps + 1];
    let mut choice_acc = vec![vec![0.0; bins]; steps];
    let mut base = predictor.session();
    for (s, &x) in slates.iter().zip(choices) {
        base.observe(s, Some(x))?;
    }
    let start = base.belief();
    drop(base);
    for _ in 0..n {
        let mut session = predictor.session();
        for (s, &x) in slates.iter().zip(choices) {
            session.observe(s, Some(x))?;
        }
        let mut hs = slates.to_vec();
        let mut hx = choices.to_vec();
        for k in 0..steps {
            let b = if k == 0 { start.clone() } else { session.belief() };
            if k > 0 {
                add(&mut beliefs[k], b.probs());
            }
            let slate = policy.sample_slate(&hs, &hx, &mut crate::oracle::RngAdapter(rng));
            let p = cm.choice_belief(b.probs(), &slate)?;
            add(&mut choice_acc[k], &p);
            let x = Item(sample_categorical(&p, rng));
            session.observe(&slate, Some(x))?;
            hs.push(slate);
            hx.push(x);
        }
        if steps > 0 {
            add(&mut beliefs[steps], session.belief().probs());
        }
    }
    // the starting belief is the same in every simulation
    let mut out = vec![start];
    for mut v in beliefs.into_iter().skip(1) {
        normalize(&mut v);
        out.push(BeliefVec::new(v)?);
    }
    let choices = choice_acc
        .into_iter()
        .map(|mut v| {
            normalize(&mut v);
            v
        })
        .collect();
    Ok(RolloutReport { beliefs: out, choices })
}

/// Counterfactual preferences at steps `0..=t_target` had `policy` run from the start.
#[allow(clippy::too_many_arguments)]
pub fn simulate_counterfactual<R: Rng + ?Sized>(
    slates: &[Slate],
    choices: &[Item],
    policy: &dyn SlatePolicy,
    initial: &dyn InitialEstimator,
    conditioned: &dyn ConditionedPredictor,
    t_target: usize,
    n: usize,
    rng: &mut R,
) -> Result<RolloutReport> {
    let b0 = initial.initial_belief(slates, choices)?;
    let predictor = conditioned.conditioned(b0)?;
    simulate_future(&[], &[], policy, predictor.as_ref(), t_target, n, rng)
}

fn add(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn dataset_shape_and_split() {
        let user = UserModel::default_model();
        let cfg = DatasetConfig { n_traj: 40, horizon: 10, ..Default::default() };
        let d = generate_dataset(&user, &cfg, 3).unwrap();
        assert_eq!(d.trajectories.len(), 40);
        assert_eq!(d.train().len(), 30);
        assert!(d.trajectories.iter().all(|t| t.len() == 10));
        let a = d.trajectories.iter().filter(|t| t.policy_id == crate::policy::SLATE_SET_POLICY_ID).count();
        assert_eq!(a, 20);
        for t in &d.trajectories {
            t.validate(36).unwrap();
        }
        assert_eq!(generate_dataset(&user, &cfg, 3).unwrap(), d);
    }

    #[test]
    fn single_step_future_is_one_prediction() {
        let oracle = Oracle::new(UserModel::default_model());
        let pol = crate::policy::random_policy(oracle.space());
        let s = vec![oracle.space().wrapped_gaussian_slate(30.0, 60.0).unwrap()];
        let x = vec![Item(4)];
        let r = simulate_future(&s, &x, &pol, &oracle, 2, 1, &mut seeded(0)).unwrap();
        assert_eq!(r.beliefs.len(), 2);
        assert_eq!(r.beliefs[0], oracle.filter_sequence(&s, &x).unwrap());
        assert!(simulate_future(&s, &x, &pol, &oracle, 0, 1, &mut seeded(0)).is_err());
    }
}
