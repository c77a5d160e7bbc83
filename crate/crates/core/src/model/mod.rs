//! Learned preference-dynamics models.
//!
//! Three recurrent models share one architecture ([`gru`]) and differ in what
//! they see and what they predict:
//!
//! - `Future`: the history so far, predicting the next preference.
//! - `Initial`: the history with the first choice hidden, predicting the
//!   initial preference. [`bayes_correct_initial`] then folds the first choice
//!   back in, which recovers the full smoothing posterior.
//! - `Counterfactual`: an initial-preference belief plus a partially masked
//!   history, predicting the next preference.
//!
//! None of them ever sees a preference. They are trained to maximize the
//! likelihood of observed choices through a known (possibly wrong) choice
//! model: the predicted belief `b` is scored by `ln Σ_u b(u) P(x | u, s)`.

pub mod gru;
pub mod mixture;

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{argmax, normalize, Item, PrefSpace, Slate};
use crate::episode::{ShiftEstimator, ShiftSession, StepBeliefs};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet};
use crate::oracle::BeliefVec;
use crate::rollout::{BeliefPredictor, ConditionedPredictor, InitialEstimator, PredictorSession, Trajectory};
use crate::user::ChoiceModel;

use gru::{encode_step, evidence, forward_backward, Batch, GruShape, GruState};
use mixture::{head_forward, Trig};
pub use mixture::{MixtureBelief, VonMisesComponent};

pub const CHECKPOINT_FORMAT: &str = "prefshift-sequence-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Future,
    Initial,
    Counterfactual,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Future => "future",
            Task::Initial => "initial",
            Task::Counterfactual => "counterfactual",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Mixture components in the output head.
    pub components: usize,
    pub hidden: usize,
    /// Longest input window; older steps are dropped at inference.
    pub horizon: usize,
    /// Share of counterfactual-model sequences with every choice hidden.
    pub full_mask_prob: f64,
    /// Per-choice hiding probability for the remaining sequences.
    pub mask_prob: f64,
    pub grad_clip: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// The learning rate decays linearly to this fraction by the last epoch.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 100,
            epochs: 25,
            components: 4,
            hidden: 64,
            horizon: 10,
            full_mask_prob: 0.5,
            mask_prob: 0.3,
            grad_clip: 5.0,
            weight_decay: 0.0,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.components > 0
            && self.hidden > 0
            && self.horizon > 0
            && (0.0..=1.0).contains(&self.full_mask_prob)
            && (0.0..=1.0).contains(&self.mask_prob)
            && self.grad_clip > 0.0
            && self.weight_decay >= 0.0
            && self.final_lr_fraction > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }
}

/// `P(x | s) = Σ_u b(u) P(x | u, s)` under `choice`.
pub fn choice_belief(belief: &BeliefVec, slate: &Slate, choice: &ChoiceModel) -> Result<Vec<f64>> {
    choice.choice_belief(belief.probs(), slate)
}

/// Fold the first step's choice into a belief over the initial preference.
pub fn bayes_correct_initial(belief: &BeliefVec, s0: &Slate, x0: Item, choice: &ChoiceModel) -> Result<BeliefVec> {
    let lik = choice.likelihood(s0, x0)?;
    if lik.len() != belief.len() {
        return Err(Error::Shape("belief length differs from bin count".into()));
    }
    BeliefVec::from_unnormalized(belief.probs().iter().zip(&lik).map(|(b, l)| b * l).collect())
}

/// A trained model. Immutable; share it freely across threads.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    task: Task,
    shape: GruShape,
    horizon: usize,
    params: ParamSet,
    choice: ChoiceModel,
    /// Average training-time initial belief (conditioned model only).
    cond_prior: Option<BeliefVec>,
    trig: std::sync::Arc<Trig>,
}

impl std::fmt::Debug for Trig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Trig({})", self.cos.len())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    task: Task,
    shape: GruShape,
    horizon: usize,
    beta_field: Vec<f64>,
    cond_prior: Option<Vec<f64>>,
    params: ParamSet,
}

impl SequenceModel {
    /// Freshly initialized model.
    pub fn new<R: Rng + ?Sized>(task: Task, choice: ChoiceModel, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = choice.space().n_bins();
        let shape = GruShape {
            n_bins: n,
            hidden: cfg.hidden,
            components: cfg.components,
            conditioned: task == Task::Counterfactual,
        };
        let params = shape.init(rng);
        Ok(Self { task, shape, horizon: cfg.horizon, params, choice, cond_prior: None, trig: Trig::new(n).into() })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_bins(&self) -> usize {
        self.shape.n_bins
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn choice_model(&self) -> &ChoiceModel {
        &self.choice
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replace the weights; the layout must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        if !params.is_finite() {
            return Err(Error::Parameter("non-finite parameters".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Average initial belief seen in training (counterfactual model only).
    pub fn cond_prior(&self) -> Option<&BeliefVec> {
        self.cond_prior.as_ref()
    }

    pub fn expect_task(&self, task: Task) -> Result<()> {
        if self.task == task {
            Ok(())
        } else {
            Err(Error::Parameter(format!("a {} model cannot serve as a {task} model", self.task)))
        }
    }

    fn check_steps(&self, slates: &[Slate], choices: &[Option<Item>]) -> Result<()> {
        if slates.len() != choices.len() {
            return Err(Error::Shape(format!("{} slates but {} choices", slates.len(), choices.len())));
        }
        for (s, x) in slates.iter().zip(choices) {
            if s.len() != self.shape.n_bins {
                return Err(Error::Shape("slate length differs from bin count".into()));
            }
            if let Some(x) = x {
                if x.0 >= self.shape.n_bins {
                    return Err(Error::BinOutOfRange { bin: x.0, n_bins: self.shape.n_bins });
                }
            }
        }
        Ok(())
    }

    /// Raw head output after feeding the last `horizon` steps.
    fn run(&self, cond: Option<&[f64]>, slates: &[Slate], choices: &[Option<Item>]) -> Result<Vec<f64>> {
        self.check_steps(slates, choices)?;
        let skip = slates.len().saturating_sub(self.horizon);
        let mut st = GruState::start(&self.shape, &self.params, cond);
        for (s, x) in slates.iter().zip(choices).skip(skip) {
            self.feed(&mut st, s, *x)?;
        }
        Ok(st.head(&self.params))
    }

    fn feed(&self, st: &mut GruState, slate: &Slate, choice: Option<Item>) -> Result<()> {
        let ev = choice.map(|x| self.choice.likelihood(slate, x).map(|l| evidence(&l))).transpose()?;
        st.step(&self.shape, &self.params, slate.probs(), choice.map(|x| x.0).zip(ev.as_deref()));
        Ok(())
    }

    fn to_belief(&self, raw: &[f64]) -> Result<BeliefVec> {
        let mut b = head_forward(raw, &self.trig).belief;
        normalize(&mut b);
        BeliefVec::new(b)
    }

    /// Prediction for the preference after `slates`/`choices`.
    pub fn predict_next(&self, slates: &[Slate], choices: &[Item]) -> Result<MixtureBelief> {
        self.expect_task(Task::Future)?;
        let x: Vec<Option<Item>> = choices.iter().copied().map(Some).collect();
        Ok(MixtureBelief::from_head(&self.run(None, slates, &x)?))
    }

    /// Belief over the initial preference from a history whose first choice is ignored.
    ///
    /// The first slate is still used: it shapes the first preference step.
    pub fn predict_initial(&self, slates: &[Slate], choices: &[Item]) -> Result<MixtureBelief> {
        self.expect_task(Task::Initial)?;
        Ok(MixtureBelief::from_head(&self.run(None, slates, &initial_mask(choices))?))
    }

    /// Prediction for the preference after a counterfactual history, given the initial belief.
    pub fn predict_counterfactual(
        &self,
        init: &BeliefVec,
        slates: &[Slate],
        choices: &[Option<Item>],
    ) -> Result<MixtureBelief> {
        self.expect_task(Task::Counterfactual)?;
        self.check_init(init)?;
        Ok(MixtureBelief::from_head(&self.run(Some(init.probs()), slates, choices)?))
    }

    /// Binned form of [`SequenceModel::predict_counterfactual`]; the empty history returns `init`.
    pub fn counterfactual_belief(
        &self,
        init: &BeliefVec,
        slates: &[Slate],
        choices: &[Option<Item>],
    ) -> Result<BeliefVec> {
        self.expect_task(Task::Counterfactual)?;
        self.check_init(init)?;
        if slates.is_empty() {
            return Ok(init.clone());
        }
        self.to_belief(&self.run(Some(init.probs()), slates, choices)?)
    }

    /// Uncorrected belief over the initial preference, binned.
    pub fn initial_belief_uncorrected(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec> {
        self.expect_task(Task::Initial)?;
        self.to_belief(&self.run(None, slates, &initial_mask(choices))?)
    }

    fn check_init(&self, init: &BeliefVec) -> Result<()> {
        if init.len() != self.shape.n_bins {
            return Err(Error::Shape("initial belief length differs from bin count".into()));
        }
        crate::env::check_simplex(init.probs())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            task: self.task,
            shape: self.shape,
            horizon: self.horizon,
            beta_field: self.choice.beta_field().to_vec(),
            cond_prior: self.cond_prior.as_ref().map(|b| b.probs().to_vec()),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.shape.conditioned != (ck.task == Task::Counterfactual) {
            return Err(Error::Checkpoint("conditioning flag does not match the task".into()));
        }
        let space = PrefSpace::new(ck.shape.n_bins)?;
        let choice = ChoiceModel::new(space, ck.beta_field)?;
        let reference = ck.shape.init(&mut crate::rng::seeded(0));
        reference.check_layout(&ck.params)?;
        if !ck.params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        let cond_prior = ck.cond_prior.map(BeliefVec::new).transpose()?;
        Ok(Self {
            task: ck.task,
            shape: ck.shape,
            horizon: ck.horizon,
            params: ck.params,
            choice,
            cond_prior,
            trig: Trig::new(ck.shape.n_bins).into(),
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

fn initial_mask(choices: &[Item]) -> Vec<Option<Item>> {
    choices.iter().enumerate().map(|(t, &x)| (t > 0).then_some(x)).collect()
}

// ---------------------------------------------------------------------------
// predictor interfaces

impl BeliefPredictor for SequenceModel {
    fn choice_model(&self) -> &ChoiceModel {
        &self.choice
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        debug_assert_eq!(self.task, Task::Future);
        Box::new(ModelSession::new(self, None))
    }
}

/// Incremental inference; replays the window once it exceeds the training horizon.
struct ModelSession<'a> {
    model: &'a SequenceModel,
    cond: Option<BeliefVec>,
    state: GruState,
    window: Vec<(Slate, Option<Item>)>,
}

impl<'a> ModelSession<'a> {
    fn new(model: &'a SequenceModel, cond: Option<BeliefVec>) -> Self {
        let state = GruState::start(&model.shape, &model.params, cond.as_ref().map(|b| b.probs()));
        Self { model, cond, state, window: Vec::new() }
    }
}

impl PredictorSession for ModelSession<'_> {
    fn belief(&self) -> BeliefVec {
        if self.window.is_empty() {
            if let Some(c) = &self.cond {
                return c.clone();
            }
        }
        let mut b = head_forward(&self.state.head(&self.model.params), &self.model.trig).belief;
        normalize(&mut b);
        BeliefVec::new(b).expect("head output is a simplex")
    }

    fn observe(&mut self, slate: &Slate, choice: Option<Item>) -> Result<()> {
        self.model.check_steps(std::slice::from_ref(slate), &[choice])?;
        let m = self.model;
        self.window.push((slate.clone(), choice));
        if self.window.len() > m.horizon {
            self.window.remove(0);
            self.state = GruState::start(&m.shape, &m.params, self.cond.as_ref().map(|b| b.probs()));
            for (s, x) in &self.window {
                m.feed(&mut self.state, s, *x)?;
            }
        } else {
            m.feed(&mut self.state, slate, choice)?;
        }
        Ok(())
    }
}

impl InitialEstimator for SequenceModel {
    fn initial_belief(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec> {
        let raw = self.initial_belief_uncorrected(slates, choices)?;
        match (slates.first(), choices.first()) {
            (Some(s0), Some(&x0)) => bayes_correct_initial(&raw, s0, x0, &self.choice),
            _ => Ok(raw),
        }
    }
}

/// The counterfactual model with its initial belief fixed.
struct Conditioned<'a> {
    model: &'a SequenceModel,
    init: BeliefVec,
}

impl BeliefPredictor for Conditioned<'_> {
    fn choice_model(&self) -> &ChoiceModel {
        &self.model.choice
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        Box::new(ModelSession::new(self.model, Some(self.init.clone())))
    }
}

impl ConditionedPredictor for SequenceModel {
    fn conditioned(&self, init: BeliefVec) -> Result<Box<dyn BeliefPredictor + '_>> {
        self.expect_task(Task::Counterfactual)?;
        self.check_init(&init)?;
        Ok(Box::new(Conditioned { model: self, init }))
    }
}

/// Predicts the uniform belief whatever it sees; the chance-level baseline.
#[derive(Clone, Debug)]
pub struct UniformPredictor {
    choice: ChoiceModel,
}

impl UniformPredictor {
    pub fn new(choice: ChoiceModel) -> Self {
        Self { choice }
    }
}

impl BeliefPredictor for UniformPredictor {
    fn choice_model(&self) -> &ChoiceModel {
        &self.choice
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        Box::new(UniformSession(self.choice.space().n_bins()))
    }
}

impl InitialEstimator for UniformPredictor {
    fn initial_belief(&self, _: &[Slate], _: &[Item]) -> Result<BeliefVec> {
        Ok(BeliefVec::uniform(self.choice.space().n_bins()))
    }
}

impl ConditionedPredictor for UniformPredictor {
    fn conditioned(&self, _: BeliefVec) -> Result<Box<dyn BeliefPredictor + '_>> {
        Ok(Box::new(self.clone()))
    }
}

struct UniformSession(usize);

impl PredictorSession for UniformSession {
    fn belief(&self) -> BeliefVec {
        BeliefVec::uniform(self.0)
    }

    fn observe(&mut self, _: &Slate, _: Option<Item>) -> Result<()> {
        Ok(())
    }
}

/// Per-step beliefs from the three learned models.
///
/// The random-recommender baseline uses the constant-slate shortcut: the
/// counterfactual model is fed uniform slates with hidden choices, so no
/// imagined choices are needed.
#[derive(Clone, Debug)]
pub struct LearnedShiftEstimator {
    future: SequenceModel,
    initial: SequenceModel,
    counterfactual: SequenceModel,
    uniform: Slate,
}

impl LearnedShiftEstimator {
    pub fn new(future: SequenceModel, initial: SequenceModel, counterfactual: SequenceModel) -> Result<Self> {
        future.expect_task(Task::Future)?;
        initial.expect_task(Task::Initial)?;
        counterfactual.expect_task(Task::Counterfactual)?;
        let n = future.n_bins();
        if initial.n_bins() != n || counterfactual.n_bins() != n {
            return Err(Error::Shape("models disagree on the bin count".into()));
        }
        let uniform = future.choice.space().uniform_slate();
        Ok(Self { future, initial, counterfactual, uniform })
    }

    pub fn future(&self) -> &SequenceModel {
        &self.future
    }

    pub fn initial(&self) -> &SequenceModel {
        &self.initial
    }

    pub fn counterfactual(&self) -> &SequenceModel {
        &self.counterfactual
    }
}

impl ShiftEstimator for LearnedShiftEstimator {
    fn choice_model(&self) -> &ChoiceModel {
        &self.future.choice
    }

    fn start(&self) -> Box<dyn ShiftSession + '_> {
        Box::new(LearnedShiftSession {
            est: self,
            filter: ModelSession::new(&self.future, None),
            slates: vec![],
            choices: vec![],
        })
    }
}

struct LearnedShiftSession<'a> {
    est: &'a LearnedShiftEstimator,
    filter: ModelSession<'a>,
    slates: Vec<Slate>,
    choices: Vec<Item>,
}

impl ShiftSession for LearnedShiftSession<'_> {
    fn beliefs(&mut self) -> Result<StepBeliefs> {
        let initial = self.est.initial.initial_belief(&self.slates, &self.choices)?;
        let t = self.slates.len();
        let uniform = vec![self.est.uniform.clone(); t];
        let nps = self.est.counterfactual.counterfactual_belief(&initial, &uniform, &vec![None; t])?;
        Ok(StepBeliefs { filter: self.filter.belief(), initial, nps })
    }

    fn observe(&mut self, slate: &Slate, choice: Item) -> Result<()> {
        self.filter.observe(slate, Some(choice))?;
        self.slates.push(slate.clone());
        self.choices.push(choice);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training

/// Per-trajectory inputs and per-step choice likelihoods under the training choice model.
struct Prepared {
    slates: Vec<Vec<f64>>,
    choices: Vec<usize>,
    lik: Vec<Vec<f64>>,
    evidence: Vec<Vec<f64>>,
    cond: Option<Vec<f64>>,
}

fn prepare(data: &[Trajectory], choice: &ChoiceModel, conds: Option<&[BeliefVec]>) -> Result<Vec<Prepared>> {
    let n = choice.space().n_bins();
    data.iter()
        .enumerate()
        .map(|(i, t)| {
            t.validate(n)?;
            let lik =
                t.slates.iter().zip(&t.choices).map(|(s, &x)| choice.likelihood(s, x)).collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                slates: t.slates.iter().map(|s| s.probs().to_vec()).collect(),
                choices: t.choices.iter().map(|x| x.0).collect(),
                evidence: lik.iter().map(|l| evidence(l)).collect(),
                lik,
                cond: conds.map(|c| c[i].probs().to_vec()),
            })
        })
        .collect()
}

fn make_batch<R: Rng + ?Sized>(
    task: Task,
    shape: &GruShape,
    rows: &[&Prepared],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Batch {
    let n = shape.n_bins;
    let len = rows[0].slates.len();
    let b = rows.len();
    let (n_inputs, positions): (usize, Vec<usize>) = match task {
        Task::Future => (len - 1, (0..len).collect()),
        Task::Initial => (len, (0..=len).collect()),
        Task::Counterfactual => (len - 1, (1..len).collect()),
    };
    let mut inputs = vec![Array2::<f64>::zeros((b, shape.input_dim())); n_inputs];
    let mut enc = vec![0.0; shape.input_dim()];
    for (r, p) in rows.iter().enumerate() {
        let full = rng.random::<f64>() < cfg.full_mask_prob;
        for (t, m) in inputs.iter_mut().enumerate() {
            let visible = match task {
                Task::Future => true,
                Task::Initial => t > 0,
                Task::Counterfactual => !full && rng.random::<f64>() >= cfg.mask_prob,
            };
            let seen = visible.then(|| (p.choices[t], &p.evidence[t][..]));
            encode_step(n, &p.slates[t], seen, &mut enc);
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&enc[..]));
        }
    }
    let targets = positions
        .into_iter()
        .map(|pos| {
            let step = if task == Task::Initial { 0 } else { pos };
            let mut m = Array2::<f64>::zeros((b, n));
            for (r, p) in rows.iter().enumerate() {
                m.row_mut(r).assign(&ndarray::ArrayView1::from(&p.lik[step][..]));
            }
            (pos, m)
        })
        .collect();
    let cond = (task == Task::Counterfactual).then(|| {
        let mut m = Array2::<f64>::zeros((b, n));
        for (r, p) in rows.iter().enumerate() {
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&p.cond.as_ref().expect("conditioning belief")[..]));
        }
        m
    });
    Batch { inputs, cond, targets }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

fn grouped_by_length(data: &[Prepared]) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, p) in data.iter().enumerate() {
        groups.entry(p.slates.len()).or_default().push(i);
    }
    groups.into_values().collect()
}

fn mean_loss<R: Rng + ?Sized>(
    task: Task,
    model: &SequenceModel,
    data: &[Prepared],
    cfg: &TrainConfig,
    rng: &mut R,
) -> f64 {
    let (mut total, mut count) = (0.0, 0);
    for group in grouped_by_length(data) {
        for chunk in group.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch(task, &model.shape, &rows, cfg, rng);
            let (l, c) = forward_backward(&model.shape, &model.params, &batch, &model.trig, None);
            total += l;
            count += c;
        }
    }
    total / count.max(1) as f64
}

/// Everything one training run needs besides data.
pub struct TrainSpec<'a> {
    pub task: Task,
    pub config: &'a TrainConfig,
    /// Choice model the likelihood is computed under.
    pub choice: &'a ChoiceModel,
    /// Trained initial-preference model; required for the counterfactual task.
    pub initial_model: Option<&'a SequenceModel>,
}

/// Fit one model by minibatch Adam on the choice negative log-likelihood.
pub fn train<R: Rng + ?Sized>(
    spec: &TrainSpec<'_>,
    train_data: &[Trajectory],
    valid_data: &[Trajectory],
    rng: &mut R,
) -> Result<(SequenceModel, Vec<EpochStats>)> {
    let cfg = spec.config;
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if train_data.iter().any(|t| t.len() < 2) {
        return Err(Error::Training("training trajectories need at least two steps".into()));
    }
    let conds = |data: &[Trajectory]| -> Result<Option<Vec<BeliefVec>>> {
        if spec.task != Task::Counterfactual {
            return Ok(None);
        }
        let init = spec
            .initial_model
            .ok_or_else(|| Error::Training("the counterfactual model needs a trained initial model".into()))?;
        init.expect_task(Task::Initial)?;
        data.iter().map(|t| init.initial_belief(&t.slates, &t.choices)).collect::<Result<Vec<_>>>().map(Some)
    };
    let train_conds = conds(train_data)?;
    let valid_conds = conds(valid_data)?;
    let train_set = prepare(train_data, spec.choice, train_conds.as_deref())?;
    let valid_set = prepare(valid_data, spec.choice, valid_conds.as_deref())?;

    let mut model = SequenceModel::new(spec.task, spec.choice.clone(), cfg, rng)?;
    if let Some(c) = &train_conds {
        let mut avg = vec![0.0; model.n_bins()];
        for b in c {
            avg.iter_mut().zip(b.probs()).for_each(|(a, v)| *a += v);
        }
        normalize(&mut avg);
        model.cond_prior = Some(BeliefVec::new(avg)?);
    }
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    opt.weight_decay = cfg.weight_decay;
    let mut grads = model.params.zeros_like();
    let groups = grouped_by_length(&train_set);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        opt.lr = cfg.learning_rate * (1.0 - frac * (1.0 - cfg.final_lr_fraction));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for g in &groups {
            let mut g = g.clone();
            shuffle(&mut g, rng);
            batches.extend(g.chunks(cfg.batch_size).map(|c| c.to_vec()));
        }
        shuffle(&mut batches, rng);
        let (mut total, mut count) = (0.0, 0);
        for idx in &batches {
            let rows: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(spec.task, &model.shape, &rows, cfg, rng);
            grads.fill(0.0);
            let (l, c) = forward_backward(&model.shape, &model.params, &batch, &model.trig, Some(&mut grads));
            if !l.is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            grads.scale(1.0 / c as f64);
            grads.clip_norm(cfg.grad_clip);
            opt.step(&mut model.params, &grads);
            total += l;
            count += c;
        }
        let valid_loss = (!valid_set.is_empty()).then(|| mean_loss(spec.task, &model, &valid_set, cfg, rng));
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
            }
        }
        stats.push(EpochStats { epoch, train_loss: total / count as f64, valid_loss });
    }
    // keep the epoch that generalized best
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok((model, stats))
}

/// Mean training loss of `model` on `data` with fresh masks; for probing.
pub fn dataset_loss<R: Rng + ?Sized>(
    model: &SequenceModel,
    data: &[Trajectory],
    cfg: &TrainConfig,
    initial_model: Option<&SequenceModel>,
    rng: &mut R,
) -> Result<f64> {
    let conds = match model.task {
        Task::Counterfactual => {
            let init = initial_model.ok_or_else(|| Error::Parameter("initial model required".into()))?;
            Some(data.iter().map(|t| init.initial_belief(&t.slates, &t.choices)).collect::<Result<Vec<_>>>()?)
        }
        _ => None,
    };
    let set = prepare(data, &model.choice, conds.as_deref())?;
    Ok(mean_loss(model.task, model, &set, cfg, rng))
}

/// [`dataset_loss`] together with its gradient, as a single batch per
/// sequence length. Masks are drawn from `rng`, so reseed it to compare calls.
pub fn dataset_loss_and_gradient<R: Rng + ?Sized>(
    model: &SequenceModel,
    data: &[Trajectory],
    cfg: &TrainConfig,
    initial_model: Option<&SequenceModel>,
    rng: &mut R,
) -> Result<(f64, ParamSet)> {
    let conds = match model.task {
        Task::Counterfactual => {
            let init = initial_model.ok_or_else(|| Error::Parameter("initial model required".into()))?;
            Some(data.iter().map(|t| init.initial_belief(&t.slates, &t.choices)).collect::<Result<Vec<_>>>()?)
        }
        _ => None,
    };
    let set = prepare(data, &model.choice, conds.as_deref())?;
    let mut grads = model.params.zeros_like();
    let (mut total, mut count) = (0.0, 0);
    for group in grouped_by_length(&set) {
        let rows: Vec<&Prepared> = group.iter().map(|&i| &set[i]).collect();
        let batch = make_batch(model.task, &model.shape, &rows, cfg, rng);
        let (l, c) = forward_backward(&model.shape, &model.params, &batch, &model.trig, Some(&mut grads));
        total += l;
        count += c;
    }
    grads.scale(1.0 / count.max(1) as f64);
    Ok((total / count.max(1) as f64, grads))
}

fn shuffle<T, R: Rng + ?Sized>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Held-out prediction quality, per timestep and averaged over timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub choice_nll: Vec<f64>,
    pub choice_accuracy: Vec<f64>,
    /// Present when the data carries ground-truth preferences.
    pub pref_nll: Option<Vec<f64>>,
    pub pref_accuracy: Option<Vec<f64>>,
    pub n_traj: usize,
}

impl PredictionReport {
    pub fn mean_choice_nll(&self) -> f64 {
        mean(&self.choice_nll)
    }

    pub fn mean_choice_accuracy(&self) -> f64 {
        mean(&self.choice_accuracy)
    }

    pub fn mean_pref_nll(&self) -> Option<f64> {
        self.pref_nll.as_deref().map(mean)
    }

    pub fn mean_pref_accuracy(&self) -> Option<f64> {
        self.pref_accuracy.as_deref().map(mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Default)]
struct Acc {
    cn: Vec<f64>,
    ca: Vec<f64>,
    pn: Vec<f64>,
    pa: Vec<f64>,
    counts: Vec<usize>,
}

impl Acc {
    fn add(&mut self, t: usize, p_x: &[f64], x: usize, belief: &[f64], pref: Option<usize>) {
        if self.counts.len() <= t {
            for v in [&mut self.cn, &mut self.ca, &mut self.pn, &mut self.pa] {
                v.resize(t + 1, 0.0);
            }
            self.counts.resize(t + 1, 0);
        }
        self.counts[t] += 1;
        self.cn[t] -= p_x[x].max(1e-300).ln();
        self.ca[t] += (argmax(p_x) == x) as u8 as f64;
        if let Some(u) = pref {
            self.pn[t] -= belief[u].max(1e-300).ln();
            self.pa[t] += (argmax(belief) == u) as u8 as f64;
        }
    }

    fn finish(self, n_traj: usize, has_prefs: bool) -> PredictionReport {
        let div = |v: Vec<f64>| v.into_iter().zip(&self.counts).map(|(s, &c)| s / c as f64).collect::<Vec<_>>();
        PredictionReport {
            choice_nll: div(self.cn),
            choice_accuracy: div(self.ca),
            pref_nll: has_prefs.then(|| div(self.pn)),
            pref_accuracy: has_prefs.then(|| div(self.pa)),
            n_traj,
        }
    }
}

/// Next-step prediction quality of any predictor, scored through its own choice model.
pub fn evaluate_predictor(predictor: &dyn BeliefPredictor, data: &[Trajectory]) -> Result<PredictionReport> {
    if data.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let cm = predictor.choice_model();
    let has_prefs = data.iter().all(|t| t.gt_prefs.is_some());
    let mut acc = Acc::default();
    for traj in data {
        let mut session = predictor.session();
        for (t, (s, &x)) in traj.slates.iter().zip(&traj.choices).enumerate() {
            let b = session.belief();
            let p_x = cm.choice_belief(b.probs(), s)?;
            let pref = traj.gt_prefs.as_ref().and_then(|g| g.get(t).copied());
            acc.add(t, &p_x, x.0, b.probs(), pref);
            session.observe(s, Some(x))?;
        }
    }
    Ok(acc.finish(data.len(), has_prefs))
}

/// Initial-preference quality after `k` later steps, for `k = 0..T-1`.
///
/// The choice metrics score the hidden first choice; preference metrics
/// score `u_0`. `corrected` folds the first choice back in.
pub fn evaluate_initial(model: &SequenceModel, data: &[Trajectory], corrected: bool) -> Result<PredictionReport> {
    model.expect_task(Task::Initial)?;
    if data.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let has_prefs = data.iter().all(|t| t.gt_prefs.is_some());
    let mut acc = Acc::default();
    for traj in data {
        for k in 0..traj.len() {
            let (s, x) = (&traj.slates[..=k], &traj.choices[..=k]);
            let b = if corrected { model.initial_belief(s, x)? } else { model.initial_belief_uncorrected(s, x)? };
            let p_x = model.choice.choice_belief(b.probs(), &s[0])?;
            let pref = traj.gt_prefs.as_ref().map(|g| g[0]);
            acc.add(k, &p_x, x[0].0, b.probs(), pref);
        }
    }
    Ok(acc.finish(data.len(), has_prefs))
}

/// Like [`evaluate_initial`] for any estimator that sees the whole prefix.
pub fn evaluate_initial_estimator(
    est: &dyn InitialEstimator,
    choice: &ChoiceModel,
    data: &[Trajectory],
) -> Result<PredictionReport> {
    if data.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let has_prefs = data.iter().all(|t| t.gt_prefs.is_some());
    let mut acc = Acc::default();
    for traj in data {
        for k in 0..traj.len() {
            let b = est.initial_belief(&traj.slates[..=k], &traj.choices[..=k])?;
            let p_x = choice.choice_belief(b.probs(), &traj.slates[0])?;
            acc.add(k, &p_x, traj.choices[0].0, b.probs(), traj.gt_prefs.as_ref().map(|g| g[0]));
        }
    }
    Ok(acc.finish(data.len(), has_prefs))
}

/// Counterfactual quality: `observed[i]` gives the initial belief, and the
/// conditioned predictor, fed `counterfactual[i]`'s slates with hidden
/// choices, is scored on that trajectory's choices and preferences.
///
/// Both trajectories must start from the same user.
pub fn evaluate_counterfactual(
    initial: &dyn InitialEstimator,
    predictor: &dyn ConditionedPredictor,
    observed: &[Trajectory],
    counterfactual: &[Trajectory],
) -> Result<PredictionReport> {
    if observed.is_empty() || observed.len() != counterfactual.len() {
        return Err(Error::Shape(format!(
            "{} observed vs {} counterfactual trajectories",
            observed.len(),
            counterfactual.len()
        )));
    }
    let has_prefs = counterfactual.iter().all(|t| t.gt_prefs.is_some());
    let mut acc = Acc::default();
    for (obs, cf) in observed.iter().zip(counterfactual) {
        let init = initial.initial_belief(&obs.slates, &obs.choices)?;
        let cond = predictor.conditioned(init)?;
        let cm = cond.choice_model();
        let mut session = cond.session();
        for (t, (s, &x)) in cf.slates.iter().zip(&cf.choices).enumerate() {
            let b = session.belief();
            let p_x = cm.choice_belief(b.probs(), s)?;
            acc.add(t, &p_x, x.0, b.probs(), cf.gt_prefs.as_ref().map(|g| g[t]));
            session.observe(s, None)?;
        }
    }
    Ok(acc.finish(observed.len(), has_prefs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::user::UserModel;

    #[test]
    fn bayes_correction_cases() {
        let space = PrefSpace::new(4).unwrap();
        let flat = ChoiceModel::new(space.clone(), vec![0.0; 4]).unwrap();
        let b = BeliefVec::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s0 = Slate::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let out = bayes_correct_initial(&b, &s0, Item(2), &flat).unwrap();
        for (a, c) in out.probs().iter().zip(b.probs()) {
            assert!((a - c).abs() < 1e-12);
        }
        let cm = ChoiceModel::new(space, vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let one = BeliefVec::one_hot(4, 1).unwrap();
        assert_eq!(bayes_correct_initial(&one, &s0, Item(3), &cm).unwrap(), one);
        // by hand: P(x | u, s) ∝ s[x] exp(β_u cos(u, x)), angles 90° apart
        let cos = [[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0], [-1.0, 0.0, 1.0, 0.0], [0.0, -1.0, 0.0, 1.0]];
        let beta: [f64; 4] = [1.0, 2.0, 0.5, 3.0];
        let lik: Vec<f64> = (0..4)
            .map(|u| {
                let w: Vec<f64> = (0..4).map(|x| s0.probs()[x] * (beta[u] * cos[u][x]).exp()).collect();
                w[0] / w.iter().sum::<f64>()
            })
            .collect();
        let mut want: Vec<f64> = (0..4).map(|u| b.probs()[u] * lik[u]).collect();
        normalize(&mut want);
        let got = bayes_correct_initial(&b, &s0, Item(0), &cm).unwrap();
        for (a, w) in got.probs().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn choice_belief_cases() {
        let space = PrefSpace::new(4).unwrap();
        let cm = ChoiceModel::new(space.clone(), vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let s = Slate::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = cm.matrix(&s).unwrap();
        let p = choice_belief(&BeliefVec::one_hot(4, 2).unwrap(), &s, &cm).unwrap();
        assert_eq!(&p[..], &m[8..12]);
        let flat = ChoiceModel::new(space, vec![0.0; 4]).unwrap();
        let p = choice_belief(&BeliefVec::new(vec![0.2, 0.3, 0.1, 0.4]).unwrap(), &s, &flat).unwrap();
        for (a, b) in p.iter().zip(s.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = choice_belief(&BeliefVec::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap(), &s, &cm).unwrap();
        for x in 0..4 {
            assert!((p[x] - 0.5 * (m[x] + m[4 + x])).abs() < 1e-12);
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { hidden: 8, components: 2, epochs: 1, batch_size: 2, learning_rate: 1e-2, ..Default::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let user = UserModel::default_model();
        let m = SequenceModel::new(Task::Counterfactual, user.choice_model(), &small_cfg(), &mut seeded(1)).unwrap();
        let back = SequenceModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.task, m.task);
        let bad = m.to_json().unwrap().replace(CHECKPOINT_FORMAT, "other");
        assert!(matches!(SequenceModel::from_json(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_task_is_rejected() {
        let user = UserModel::default_model();
        let m = SequenceModel::new(Task::Future, user.choice_model(), &small_cfg(), &mut seeded(1)).unwrap();
        assert!(m.predict_initial(&[], &[]).is_err());
        assert!(m.conditioned(BeliefVec::uniform(36)).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_valid() {
        let user = UserModel::default_model();
        let m = SequenceModel::new(Task::Future, user.choice_model(), &small_cfg(), &mut seeded(1)).unwrap();
        let s = vec![user.space().wrapped_gaussian_slate(10.0, 30.0).unwrap(); 3];
        let x = vec![Item(1), Item(2), Item(0)];
        let a = m.predict_next(&s, &x).unwrap();
        assert_eq!(a, m.predict_next(&s, &x).unwrap());
        let w: f64 = a.components.iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
        assert!(a.components.iter().all(|c| c.concentration > 0.0));
        assert!(m.predict_next(&s, &x[..2]).is_err());
        // empty history is well defined
        crate::env::check_simplex(&m.predict_next(&[], &[]).unwrap().density_at_bins(user.space())).unwrap();
    }

    #[test]
    fn session_matches_direct_prediction() {
        let user = UserModel::default_model();
        let m = SequenceModel::new(Task::Future, user.choice_model(), &small_cfg(), &mut seeded(1)).unwrap();
        let s: Vec<Slate> =
            (0..13).map(|i| user.space().wrapped_gaussian_slate(10.0 * i as f64, 30.0).unwrap()).collect();
        let x: Vec<Item> = (0..13).map(|i| Item((i * 7) % 36)).collect();
        let mut sess = m.session();
        for k in 0..13 {
            sess.observe(&s[k], Some(x[k])).unwrap();
            let want = m
                .to_belief(&m.run(None, &s[..=k], &x[..=k].iter().copied().map(Some).collect::<Vec<_>>()).unwrap())
                .unwrap();
            let got = sess.belief();
            assert!(crate::env::total_variation(want.probs(), got.probs()) < 1e-12, "step {k}");
        }
    }
}
