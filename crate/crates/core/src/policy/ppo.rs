//! Clipped-surrogate policy-gradient trainer.
//!
//! Each iteration rolls a batch of episodes with the current policy, turns
//! the per-step rewards into plain discounted returns (no bootstrapping, no
//! GAE), and takes several passes of minibatch Adam over the batch on the
//! clipped surrogate plus a clipped value loss.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{PrefSpace, Slate};
use crate::episode::{generate_training_trajectory, Observation, RecSession, Recommender, ShiftEstimator, UserSource};
use crate::error::{Error, Result};
use crate::metrics::{penalized_reward, ShiftMetrics, StepRewards};
use crate::nn::{Adam, ParamSet};
use crate::policy::lstm::{ppo_loss, step, LossParts, LossWeights, LstmShape, LstmState, SeqBatch};
use crate::policy::ActionSpace;
use crate::rng::{sample_categorical, stream};

pub const POLICY_FORMAT: &str = "prefshift-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    /// Environment steps per iteration.
    pub batch_size: usize,
    /// Environment steps per gradient update.
    pub minibatch_size: usize,
    /// Upper bound on collection threads.
    pub workers: usize,
    pub learning_rate: f64,
    /// Passes over each iteration's batch.
    pub updates_per_minibatch: usize,
    pub policy_clip: f64,
    pub value_clip: f64,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub grad_clip: f64,
    pub gamma: f64,
    pub penalized: bool,
    pub nu1: f64,
    pub nu2: f64,
    pub iterations: usize,
    pub horizon: usize,
    pub hidden: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            batch_size: 1200,
            minibatch_size: 600,
            workers: 4,
            learning_rate: 0.005,
            updates_per_minibatch: 8,
            policy_clip: 0.5,
            value_clip: 50.0,
            value_loss_coeff: 8.0,
            entropy_coeff: 0.0,
            grad_clip: 10.0,
            gamma: 0.99,
            penalized: false,
            nu1: 1.0,
            nu2: 1.0,
            iterations: 60,
            horizon: 10,
            hidden: 64,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon > 0
            && self.batch_size >= self.horizon
            && self.minibatch_size >= self.horizon
            && self.workers > 0
            && self.learning_rate > 0.0
            && self.updates_per_minibatch > 0
            && self.policy_clip > 0.0
            && self.value_clip > 0.0
            && self.value_loss_coeff >= 0.0
            && self.entropy_coeff >= 0.0
            && self.grad_clip > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && self.nu1 >= 0.0
            && self.nu2 >= 0.0
            && self.hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid policy-gradient configuration: {self:?}")))
        }
    }

    /// Reward the trainer sees for one step.
    pub fn reward(&self, r: &StepRewards) -> f64 {
        if self.penalized {
            penalized_reward(r, self.nu1, self.nu2)
        } else {
            r.eng
        }
    }
}

/// `G_t = r_t + γ G_{t+1}`
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// A trained recurrent recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmPolicy {
    id: String,
    shape: LstmShape,
    horizon: usize,
    params: ParamSet,
    actions: ActionSpace,
    /// Pick the most likely action instead of sampling.
    pub greedy: bool,
}

impl PartialEq for ActionSpace {
    fn eq(&self, other: &Self) -> bool {
        self.slates() == other.slates()
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    version: u32,
    id: String,
    shape: LstmShape,
    horizon: usize,
    params: ParamSet,
}

impl LstmPolicy {
    pub fn new<R: Rng + ?Sized>(
        id: impl Into<String>,
        space: &PrefSpace,
        hidden: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        let shape = LstmShape { n_bins: space.n_bins(), hidden, n_actions: ActionSpace::N_ACTIONS };
        Self { id: id.into(), params: shape.init(rng), shape, horizon, actions: ActionSpace::new(space), greedy: false }
    }

    pub fn shape(&self) -> &LstmShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// Action probabilities and value for one observation, advancing `state`.
    pub fn act(&self, state: &mut LstmState, obs: &Observation<'_>) -> (Vec<f64>, f64, Vec<f64>) {
        let mut x = vec![0.0; self.shape.input_dim()];
        self.shape.encode(obs, self.horizon, &mut x);
        let (probs, value) = step(&self.shape, &self.params, state, &x);
        (probs, value, x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            id: self.id.clone(),
            shape: self.shape,
            horizon: self.horizon,
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: PolicyCheckpoint = serde_json::from_str(s)?;
        if ck.format != POLICY_FORMAT || ck.version != POLICY_VERSION {
            return Err(Error::Checkpoint(format!("unsupported policy checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.shape.n_actions != ActionSpace::N_ACTIONS {
            return Err(Error::Checkpoint("unexpected action count".into()));
        }
        ck.shape.init(&mut crate::rng::seeded(0)).check_layout(&ck.params)?;
        if !ck.params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        let space = PrefSpace::new(ck.shape.n_bins)?;
        Ok(Self {
            id: ck.id,
            shape: ck.shape,
            horizon: ck.horizon,
            params: ck.params,
            actions: ActionSpace::new(&space),
            greedy: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Recommender for LstmPolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn begin(&self) -> Box<dyn RecSession + '_> {
        Box::new(PolicySession { policy: self, state: LstmState::zeros(&self.shape), log: None })
    }
}

/// What the trainer needs from each decision.
#[derive(Clone, Debug, Default)]
struct StepLog {
    inputs: Vec<Vec<f64>>,
    actions: Vec<usize>,
    logp: Vec<f64>,
    values: Vec<f64>,
}

struct PolicySession<'a> {
    policy: &'a LstmPolicy,
    state: LstmState,
    log: Option<StepLog>,
}

impl RecSession for PolicySession<'_> {
    fn next_slate(&mut self, obs: &Observation<'_>, rng: &mut dyn RngCore) -> Result<Slate> {
        let (probs, value, x) = self.policy.act(&mut self.state, obs);
        let a = if self.policy.greedy { crate::env::argmax(&probs) } else { sample_categorical(&probs, rng) };
        if let Some(log) = self.log.as_mut() {
            log.inputs.push(x);
            log.actions.push(a);
            log.logp.push(probs[a].ln());
            log.values.push(value);
        }
        Ok(self.policy.actions.slate(a).clone())
    }
}

struct Rollout {
    log: StepLog,
    rewards: Vec<StepRewards>,
    returns: Vec<f64>,
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    /// Mean undiscounted training reward per episode.
    pub mean_return: f64,
    pub eng: f64,
    pub eng_u0: f64,
    pub eng_nps: f64,
    pub loss: f64,
    pub clip_frac: f64,
}

impl CurveRow {
    pub const CSV_HEADER: &'static str = "iteration,mean_return,eng,eng_u0,eng_nps";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{:.6}", self.iteration, self.mean_return, self.eng, self.eng_u0, self.eng_nps)
    }
}

fn collect(
    policy: &LstmPolicy,
    estimator: &dyn ShiftEstimator,
    source: UserSource<'_>,
    cfg: &PgConfig,
    seed: u64,
    iteration: usize,
) -> Result<Vec<Rollout>> {
    let n_episodes = cfg.batch_size / cfg.horizon;
    let run = |i: usize| -> Result<Rollout> {
        let mut rng = stream(seed, &[1, iteration as u64, i as u64]);
        let mut session =
            PolicySession { policy, state: LstmState::zeros(&policy.shape), log: Some(StepLog::default()) };
        let ep = generate_training_trajectory(source, &mut session, estimator, cfg.horizon, i as u64, &mut rng)?;
        let rewards: Vec<f64> = ep.rewards.iter().map(|r| cfg.reward(r)).collect();
        let returns = discounted_returns(&rewards, cfg.gamma);
        Ok(Rollout { log: session.log.expect("recording session"), rewards: ep.rewards, returns })
    };
    if cfg.workers <= 1 {
        (0..n_episodes).map(run).collect()
    } else {
        (0..n_episodes).into_par_iter().map(run).collect()
    }
}

fn to_batch(rollouts: &[&Rollout], input_dim: usize) -> SeqBatch {
    let steps = rollouts[0].returns.len();
    let rows = rollouts.len();
    let mut inputs = vec![Array2::<f64>::zeros((rows, input_dim)); steps];
    let grid = |f: &dyn Fn(&Rollout, usize) -> f64| -> Vec<Vec<f64>> {
        (0..steps).map(|t| rollouts.iter().map(|r| f(r, t)).collect()).collect()
    };
    for (r, ro) in rollouts.iter().enumerate() {
        for (t, m) in inputs.iter_mut().enumerate() {
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&ro.log.inputs[t][..]));
        }
    }
    SeqBatch {
        inputs,
        actions: (0..steps).map(|t| rollouts.iter().map(|r| r.log.actions[t]).collect()).collect(),
        old_logp: grid(&|r, t| r.log.logp[t]),
        old_value: grid(&|r, t| r.log.values[t]),
        returns: grid(&|r, t| r.returns[t]),
        advantages: grid(&|r, t| r.returns[t] - r.log.values[t]),
    }
}

/// Train a fresh policy. `on_iteration` sees each curve row as it is produced.
pub fn train_policy(
    id: &str,
    space: &PrefSpace,
    estimator: &dyn ShiftEstimator,
    source: UserSource<'_>,
    cfg: &PgConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&CurveRow),
) -> Result<(LstmPolicy, Vec<CurveRow>)> {
    cfg.validate()?;
    let mut policy = LstmPolicy::new(id, space, cfg.hidden, cfg.horizon, &mut stream(seed, &[0]));
    let mut opt = Adam::new(&policy.params, cfg.learning_rate);
    let weights = LossWeights {
        clip: cfg.policy_clip,
        value_clip: cfg.value_clip,
        value_coeff: cfg.value_loss_coeff,
        entropy_coeff: cfg.entropy_coeff,
    };
    let per_minibatch = (cfg.minibatch_size / cfg.horizon).max(1);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut grads = policy.params.zeros_like();
    for iteration in 0..cfg.iterations {
        let rollouts = collect(&policy, estimator, source, cfg, seed, iteration)?;
        let n = rollouts.len() as f64;
        let mean_return =
            rollouts.iter().map(|r| r.rewards.iter().map(|s| cfg.reward(s)).sum::<f64>()).sum::<f64>() / n;
        let mut metrics = ShiftMetrics::default();
        for r in &rollouts {
            let m = ShiftMetrics::from_steps(&r.rewards);
            metrics.eng += m.eng / n;
            metrics.eng_u0 += m.eng_u0 / n;
            metrics.eng_nps += m.eng_nps / n;
        }
        let mut rng = stream(seed, &[2, iteration as u64]);
        let mut order: Vec<usize> = (0..rollouts.len()).collect();
        let mut last = LossParts::default();
        for _ in 0..cfg.updates_per_minibatch {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(per_minibatch) {
                let rows: Vec<&Rollout> = chunk.iter().map(|&i| &rollouts[i]).collect();
                let batch = to_batch(&rows, policy.shape.input_dim());
                grads.fill(0.0);
                last = ppo_loss(&policy.shape, &policy.params, &batch, &weights, Some(&mut grads));
                if !last.total.is_finite() || !grads.is_finite() {
                    return Err(Error::Training(format!("non-finite policy loss at iteration {iteration}: {last:?}")));
                }
                grads.clip_norm(cfg.grad_clip);
                opt.step(&mut policy.params, &grads);
            }
        }
        let row = CurveRow {
            iteration,
            mean_return,
            eng: metrics.eng,
            eng_u0: metrics.eng_u0,
            eng_nps: metrics.eng_nps,
            loss: last.total,
            clip_frac: last.clip_frac,
        };
        on_iteration(&row);
        curve.push(row);
    }
    Ok((policy, curve))
}
