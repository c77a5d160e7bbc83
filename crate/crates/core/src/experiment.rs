//! Experiment configuration and the pipeline stages behind the command-line
//! runner.
//!
//! Every stage is a pure function of the config: each draws randomness from
//! its own stream of the master seed, so stages can be rerun in isolation
//! and produce the same files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::PrefSpace;
use crate::episode::{generate_training_trajectory, OracleShiftEstimator, PolicyRecommender, Recommender, UserSource};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, EvalConfig, EvalMode, EvalReport};
use crate::model::{
    evaluate_counterfactual, evaluate_initial_estimator, evaluate_predictor, train, EpochStats, LearnedShiftEstimator,
    PredictionReport, SequenceModel, Task, TrainConfig, TrainSpec, UniformPredictor,
};
use crate::oracle::Oracle;
use crate::policy::ppo::{train_policy, CurveRow, LstmPolicy, PgConfig};
use crate::policy::random_policy;
use crate::rng::{derive_seed, stream};
use crate::rollout::{generate_dataset, simulate_user_from, Dataset, DatasetConfig, Trajectory};
use crate::user::{BetaFieldSpec, ChoiceModel, UserModel, UserParams, UserState};

// stream tags under the master seed
const DATA: u64 = 1;
const MODEL: u64 = 2;
const POLICY: u64 = 3;
const EVAL: u64 = 4;
const HEATMAP: u64 = 5;
const COUNTERFACTUAL: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserConfig {
    pub n_bins: usize,
    pub lambda: f64,
    pub beta_d: f64,
    pub init_pref_mean: f64,
    pub init_pref_std: f64,
    pub beta_field: BetaFieldSpec,
}

impl Default for UserConfig {
    fn default() -> Self {
        Self {
            n_bins: 36,
            lambda: crate::user::DEFAULT_LAMBDA,
            beta_d: crate::user::DEFAULT_BETA_D,
            init_pref_mean: crate::user::DEFAULT_INIT_MEAN,
            init_pref_std: crate::user::DEFAULT_INIT_STD,
            beta_field: BetaFieldSpec::default(),
        }
    }
}

impl UserConfig {
    pub fn space(&self) -> Result<PrefSpace> {
        PrefSpace::new(self.n_bins)
    }

    pub fn build(&self) -> Result<UserModel> {
        let space = self.space()?;
        let params = UserParams {
            lambda: self.lambda,
            beta_d: self.beta_d,
            beta_c_field: self.beta_field.evaluate(&space)?,
            init_pref_mean: self.init_pref_mean,
            init_pref_std: self.init_pref_std,
        };
        UserModel::new(space, params)
    }

    /// The choice rule the learned models assume. The misspecified variant
    /// swaps the two peak heights of the temperature field.
    pub fn assumed_choice_model(&self, misspecified: bool) -> Result<ChoiceModel> {
        let space = self.space()?;
        let field = if misspecified {
            let mut f = self.beta_field.clone();
            if f.peaks.len() != 2 {
                return Err(Error::Config("swapping the choice model needs exactly two peaks".into()));
            }
            let (a, b) = (f.peaks[0].1, f.peaks[1].1);
            f.peaks[0].1 = b;
            f.peaks[1].1 = a;
            f
        } else {
            self.beta_field.clone()
        };
        ChoiceModel::new(space.clone(), field.evaluate(&space)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub user: UserConfig,
    pub dataset: DatasetConfig,
    pub model: TrainConfig,
    pub policy: PgConfig,
    pub eval: EvalConfig,
    pub heatmap_users: usize,
    /// Train the learned models under the swapped temperature field.
    pub misspecified_choice_model: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            user: UserConfig::default(),
            dataset: DatasetConfig::default(),
            model: TrainConfig::default(),
            policy: PgConfig::default(),
            eval: EvalConfig::default(),
            heatmap_users: 1000,
            misspecified_choice_model: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.user.build()?;
        self.model.validate()?;
        self.policy.validate()?;
        self.eval.validate()?;
        if self.dataset.n_traj == 0 || self.dataset.horizon == 0 {
            return Err(Error::Config("the dataset needs at least one trajectory and one step".into()));
        }
        if self.heatmap_users == 0 {
            return Err(Error::Config("heatmap cohort is empty".into()));
        }
        if self.policy.horizon != self.eval.horizon {
            return Err(Error::Config("policy and evaluation horizons differ".into()));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Write `contents` under the output directory, creating it if needed.
pub fn write_output(cfg: &ExperimentConfig, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let p = cfg.path(name);
    std::fs::write(&p, contents)?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// data and models

pub const DATASET_FILE: &str = "dataset.jsonl";

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(&cfg.user.build()?, &cfg.dataset, derive_seed(cfg.seed, &[DATA]))
}

/// The dataset file in the output directory, generated first if missing.
pub fn load_or_gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let p = cfg.path(DATASET_FILE);
    if p.exists() {
        let d = Dataset::read_jsonl(&p, cfg.dataset.train_fraction)?;
        for t in &d.trajectories {
            t.validate(cfg.user.n_bins)?;
        }
        return Ok(d);
    }
    let d = gen_data(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    d.write_jsonl(&p)?;
    Ok(d)
}

pub fn model_file(task: Task) -> String {
    format!("model_{task}.json")
}

fn task_tag(task: Task) -> u64 {
    match task {
        Task::Future => 0,
        Task::Initial => 1,
        Task::Counterfactual => 2,
    }
}

/// Train one of the three models; the counterfactual task needs the trained initial model.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    task: Task,
    initial: Option<&SequenceModel>,
) -> Result<(SequenceModel, Vec<EpochStats>)> {
    let choice = cfg.user.assumed_choice_model(cfg.misspecified_choice_model)?;
    let spec = TrainSpec { task, config: &cfg.model, choice: &choice, initial_model: initial };
    let mut rng = stream(cfg.seed, &[MODEL, task_tag(task)]);
    train(&spec, data.train(), data.validation(), &mut rng)
}

pub fn epoch_csv(stats: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,valid_loss\n");
    for e in stats {
        let v = e.valid_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{v}", e.epoch, e.train_loss);
    }
    s
}

pub struct TrainedModels {
    pub future: SequenceModel,
    pub initial: SequenceModel,
    pub counterfactual: SequenceModel,
}

impl TrainedModels {
    pub fn train(
        cfg: &ExperimentConfig,
        data: &Dataset,
        mut on_model: impl FnMut(Task, &[EpochStats]),
    ) -> Result<Self> {
        let (future, s) = train_model(cfg, data, Task::Future, None)?;
        on_model(Task::Future, &s);
        let (initial, s) = train_model(cfg, data, Task::Initial, None)?;
        on_model(Task::Initial, &s);
        let (counterfactual, s) = train_model(cfg, data, Task::Counterfactual, Some(&initial))?;
        on_model(Task::Counterfactual, &s);
        Ok(Self { future, initial, counterfactual })
    }

    pub fn save(&self, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        for m in [&self.future, &self.initial, &self.counterfactual] {
            m.save(&cfg.path(&model_file(m.task())))?;
        }
        Ok(())
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let load = |task: Task| -> Result<SequenceModel> {
            let m = SequenceModel::load(&cfg.path(&model_file(task)))?;
            m.expect_task(task)?;
            Ok(m)
        };
        Ok(Self {
            future: load(Task::Future)?,
            initial: load(Task::Initial)?,
            counterfactual: load(Task::Counterfactual)?,
        })
    }

    pub fn estimator(&self) -> Result<LearnedShiftEstimator> {
        LearnedShiftEstimator::new(self.future.clone(), self.initial.clone(), self.counterfactual.clone())
    }
}

/// One row of the model-quality table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelEvalRow {
    pub task: Task,
    pub predictor: String,
    pub report: PredictionReport,
}

impl ModelEvalRow {
    pub const CSV_HEADER: &'static str = "task,predictor,choice_nll,choice_accuracy,pref_nll,pref_accuracy";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.task,
            self.predictor,
            r.mean_choice_nll(),
            r.mean_choice_accuracy(),
            opt(r.mean_pref_nll()),
            opt(r.mean_pref_accuracy())
        )
    }
}

/// For each trajectory, the same user restarted from its initial preference
/// under the random recommender.
pub fn counterfactual_data(cfg: &ExperimentConfig, user: &UserModel, data: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let rnd = random_policy(user.space());
    data.iter()
        .enumerate()
        .map(|(i, t)| {
            let u0 =
                t.gt_prefs.as_ref().and_then(|g| g.first().copied()).ok_or_else(|| {
                    Error::Parameter(format!("trajectory {} has no ground-truth preferences", t.user_id))
                })?;
            let state = UserState { pref: u0, slate_belief: user.space().uniform_slate() };
            simulate_user_from(
                user,
                &rnd,
                state,
                t.len(),
                t.user_id,
                &mut stream(cfg.seed, &[COUNTERFACTUAL, i as u64]),
            )
        })
        .collect()
}

/// Held-out quality of the three models against the exact oracle and a
/// chance-level baseline.
pub fn eval_models(cfg: &ExperimentConfig, data: &Dataset, models: &TrainedModels) -> Result<Vec<ModelEvalRow>> {
    let user = cfg.user.build()?;
    let oracle = Oracle::new(user.clone());
    let uniform = UniformPredictor::new(models.future.choice_model().clone());
    let valid = data.validation();
    let cf = counterfactual_data(cfg, &user, valid)?;
    let row = |task, name: &str, report| ModelEvalRow { task, predictor: name.to_string(), report };
    Ok(vec![
        row(Task::Future, "oracle", evaluate_predictor(&oracle, valid)?),
        row(Task::Future, "learned", evaluate_predictor(&models.future, valid)?),
        row(Task::Future, "random", evaluate_predictor(&uniform, valid)?),
        row(Task::Initial, "oracle", evaluate_initial_estimator(&oracle, oracle.choice(), valid)?),
        row(
            Task::Initial,
            "learned",
            evaluate_initial_estimator(&models.initial, models.initial.choice_model(), valid)?,
        ),
        row(Task::Initial, "random", evaluate_initial_estimator(&uniform, models.initial.choice_model(), valid)?),
        row(Task::Counterfactual, "oracle", evaluate_counterfactual(&oracle, &oracle, valid, &cf)?),
        row(
            Task::Counterfactual,
            "learned",
            evaluate_counterfactual(&models.initial, &models.counterfactual, valid, &cf)?,
        ),
        row(Task::Counterfactual, "random", evaluate_counterfactual(&uniform, &uniform, valid, &cf)?),
    ])
}

// ---------------------------------------------------------------------------
// policies

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Ground-truth users with exact beliefs.
    Oracle,
    /// Imagined users from the learned models.
    Sim,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Oracle => "oracle",
            TrainMode::Sim => "sim",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(TrainMode::Oracle),
            "sim" => Ok(TrainMode::Sim),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected oracle or sim"))),
        }
    }
}

/// One training condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCell {
    pub gamma: f64,
    pub penalized: bool,
    pub mode: TrainMode,
}

impl PolicyCell {
    pub fn id(&self) -> String {
        let kind = if self.gamma == 0.0 {
            "myopic".to_string()
        } else if self.gamma == 0.99 {
            "rl".to_string()
        } else {
            format!("g{}", self.gamma)
        };
        format!("{kind}_{}_{}", if self.penalized { "pen" } else { "unpen" }, self.mode)
    }

    /// The four oracle-trained conditions followed by the two trained in simulation.
    pub fn matrix() -> Vec<PolicyCell> {
        let c = |gamma, penalized, mode| PolicyCell { gamma, penalized, mode };
        vec![
            c(0.0, false, TrainMode::Oracle),
            c(0.99, false, TrainMode::Oracle),
            c(0.0, true, TrainMode::Oracle),
            c(0.99, true, TrainMode::Oracle),
            c(0.99, false, TrainMode::Sim),
            c(0.99, true, TrainMode::Sim),
        ]
    }
}

pub fn policy_file(id: &str) -> String {
    format!("policy_{id}.json")
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = format!("{}\n", CurveRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Train one policy cell. `seed_offset` separates replicate runs.
pub fn train_policy_cell(
    cfg: &ExperimentConfig,
    cell: PolicyCell,
    models: Option<&TrainedModels>,
    seed_offset: u64,
    on_iteration: impl FnMut(&CurveRow),
) -> Result<(LstmPolicy, Vec<CurveRow>)> {
    let pg = PgConfig { gamma: cell.gamma, penalized: cell.penalized, ..cfg.policy.clone() };
    let user = cfg.user.build()?;
    let seed = derive_seed(cfg.seed, &[POLICY, seed_offset]);
    let id = cell.id();
    match cell.mode {
        TrainMode::Oracle => {
            let est = OracleShiftEstimator::new(Oracle::new(user.clone()))?;
            train_policy(&id, user.space(), &est, UserSource::GroundTruth(&user), &pg, seed, on_iteration)
        }
        TrainMode::Sim => {
            let models =
                models.ok_or_else(|| Error::Config("training in simulation needs the learned models".into()))?;
            let est = models.estimator()?;
            train_policy(&id, user.space(), &est, UserSource::Imagined, &pg, seed, on_iteration)
        }
    }
}

/// Evaluate a recommender either on ground-truth users with exact beliefs
/// or on imagined users with the learned beliefs.
pub fn eval_policy(
    cfg: &ExperimentConfig,
    rec: &dyn Recommender,
    mode: EvalMode,
    models: Option<&TrainedModels>,
) -> Result<EvalReport> {
    let user = cfg.user.build()?;
    let seed = derive_seed(cfg.seed, &[EVAL]);
    match mode {
        EvalMode::Oracle => {
            let est = OracleShiftEstimator::new(Oracle::new(user.clone()))?;
            evaluate_policy(rec, &est, UserSource::GroundTruth(&user), &cfg.eval, seed)
        }
        EvalMode::Estimated => {
            let models = models.ok_or_else(|| Error::Config("estimated evaluation needs the learned models".into()))?;
            evaluate_policy(rec, &models.estimator()?, UserSource::Imagined, &cfg.eval, seed)
        }
    }
}

// ---------------------------------------------------------------------------
// heatmaps

/// Marginal ground-truth preference distribution of a cohort at each step,
/// including the step after the last recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `columns[t][u]`
    pub columns: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn n_bins(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Bins as rows, timesteps as columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin");
        for t in 0..self.columns.len() {
            let _ = write!(s, ",t{t}");
        }
        s.push('\n');
        for u in 0..self.n_bins() {
            let _ = write!(s, "{u}");
            for col in &self.columns {
                let _ = write!(s, ",{:.6}", col[u]);
            }
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit graymap, `scale` pixels per cell, highest bin on top,
    /// brightness relative to the largest entry.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let (w, h) = (self.columns.len() * scale, self.n_bins() * scale);
        let max = self.columns.iter().flatten().cloned().fold(0.0, f64::max).max(1e-12);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            let u = self.n_bins() - 1 - y / scale;
            for x in 0..w {
                out.push((255.0 * self.columns[x / scale][u] / max).round() as u8);
            }
        }
        out
    }

    /// Shannon entropy of column `t`, in nats.
    pub fn entropy(&self, t: usize) -> f64 {
        -self.columns[t].iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Roll `cfg.heatmap_users` ground-truth users under `rec`.
pub fn heatmap(cfg: &ExperimentConfig, rec: &dyn Recommender) -> Result<Heatmap> {
    use rayon::prelude::*;
    let user = cfg.user.build()?;
    let est = OracleShiftEstimator::new(Oracle::new(user.clone()))?;
    let horizon = cfg.eval.horizon;
    let paths = (0..cfg.heatmap_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, &[HEATMAP, i as u64]);
            let mut session = rec.begin();
            let ep = generate_training_trajectory(
                UserSource::GroundTruth(&user),
                session.as_mut(),
                &est,
                horizon,
                i as u64,
                &mut rng,
            )?;
            let mut prefs = ep.trajectory.gt_prefs.unwrap_or_default();
            prefs.extend(ep.final_pref);
            Ok(prefs)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = user.n_bins();
    let mut columns = vec![vec![0.0; n]; horizon + 1];
    let w = 1.0 / paths.len() as f64;
    for p in &paths {
        for (t, &u) in p.iter().enumerate() {
            columns[t][u] += w;
        }
    }
    Ok(Heatmap { columns })
}

pub fn random_recommender(cfg: &ExperimentConfig) -> Result<PolicyRecommender<crate::policy::MixturePolicy>> {
    Ok(PolicyRecommender(random_policy(&cfg.user.space()?)))
}

// ---------------------------------------------------------------------------
// full pipeline

/// Everything the driver produces, for printing and for tests.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub model_eval: Vec<ModelEvalRow>,
    /// (policy id, eval mode, report)
    pub policy_eval: Vec<(String, EvalMode, EvalReport)>,
    /// (policy id, entropy of the final heatmap column)
    pub final_entropy: Vec<(String, f64)>,
}

/// Data, the three models, the six policy cells, both evaluations and the
/// heatmaps, with every artifact written under `cfg.out_dir`.
pub fn run_all(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_output(cfg, "config.json", &serde_json::to_string_pretty(cfg)?)?;

    let data = load_or_gen_data(cfg)?;
    log(&format!("dataset: {} trajectories", data.trajectories.len()));
    let models = TrainedModels::train(cfg, &data, |task, stats| {
        let _ = write_output(cfg, &format!("train_{task}.csv"), &epoch_csv(stats));
        log(&format!("trained {task} model ({} epochs)", stats.len()));
    })?;
    models.save(cfg)?;

    let model_eval = eval_models(cfg, &data, &models)?;
    let mut csv = format!("{}\n", ModelEvalRow::CSV_HEADER);
    for r in &model_eval {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_output(cfg, "model_eval.csv", &csv)?;

    let mut policy_eval = Vec::new();
    let mut final_entropy = Vec::new();
    let mut eval_csv = format!("{}\n", EvalReport::CSV_HEADER);
    let mut record = |id: &str, training: &str, rec: &dyn Recommender, log: &mut dyn FnMut(&str)| -> Result<()> {
        for mode in [EvalMode::Oracle, EvalMode::Estimated] {
            let rep = eval_policy(cfg, rec, mode, Some(&models))?;
            eval_csv.push_str(&rep.csv_row(id, training, mode));
            eval_csv.push('\n');
            log(&format!(
                "{id} [{mode}] eng {:.3} eng_u0 {:.3} eng_nps {:.3} sum {:.3}",
                rep.mean.eng, rep.mean.eng_u0, rep.mean.eng_nps, rep.mean.sum
            ));
            policy_eval.push((id.to_string(), mode, rep));
        }
        let hm = heatmap(cfg, rec)?;
        write_output(cfg, &format!("heatmap_{id}.csv"), &hm.to_csv())?;
        std::fs::write(cfg.path(&format!("heatmap_{id}.pgm")), hm.to_pgm(8))?;
        final_entropy.push((id.to_string(), hm.entropy(hm.columns.len() - 1)));
        Ok(())
    };

    record("random", "none", &random_recommender(cfg)?, &mut log)?;
    for (k, cell) in PolicyCell::matrix().into_iter().enumerate() {
        let id = cell.id();
        let (policy, curve) = train_policy_cell(cfg, cell, Some(&models), k as u64, |_| {})?;
        policy.save(&cfg.path(&policy_file(&id)))?;
        write_output(cfg, &format!("curve_{id}.csv"), &curve_csv(&curve))?;
        record(&id, &cell.mode.to_string(), &policy, &mut log)?;
    }
    write_output(cfg, "policy_eval.csv", &eval_csv)?;
    Ok(RunSummary { model_eval, policy_eval, final_entropy })
}
