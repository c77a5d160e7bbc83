//! Safe-shift metrics and policy evaluation.
//!
//! A step's chosen item can be scored against any preference belief. Scoring
//! against the preference the policy actually induced gives engagement;
//! scoring against a "safe" belief (the initial preference, or the preference
//! the random recommender would have induced) tells how well the policy serves
//! a user whose preferences had shifted only in trusted ways.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::PrefSpace;
use crate::episode::{generate_training_trajectory, Recommender, ShiftEstimator, UserSource};
use crate::error::{Error, Result};
use crate::rng::stream;

/// `Σ_x p(x) Σ_u b(u) cos(u, x)`
pub fn cross_engagement(space: &PrefSpace, choice_dist: &[f64], belief: &[f64]) -> Result<f64> {
    let n = space.n_bins();
    if choice_dist.len() != n || belief.len() != n {
        return Err(Error::Shape("distribution length differs from bin count".into()));
    }
    let mut total = 0.0;
    for (u, &b) in belief.iter().enumerate() {
        if b != 0.0 {
            total += b * crate::user::dot(space.cos_row(u), choice_dist);
        }
    }
    Ok(total)
}

/// `Σ_u b(u) Σ_x P(x | u, s) cos(u, x)` for a row-major choice matrix.
pub fn expected_engagement(space: &PrefSpace, choice_matrix: &[f64], belief: &[f64]) -> f64 {
    let n = space.n_bins();
    belief
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0.0)
        .map(|(u, &b)| b * crate::user::dot(&choice_matrix[u * n..(u + 1) * n], space.cos_row(u)))
        .sum()
}

/// `D = Σ_t [r(u_t^π) - r(u_t^safe)]`, each scored on the step's choice distribution.
pub fn shift_distance(
    space: &PrefSpace,
    beliefs_pi: &[Vec<f64>],
    choices_pi: &[Vec<f64>],
    beliefs_safe: &[Vec<f64>],
) -> Result<f64> {
    if beliefs_pi.len() != choices_pi.len() || beliefs_safe.len() != choices_pi.len() {
        return Err(Error::Shape("per-step sequences differ in length".into()));
    }
    let mut d = 0.0;
    for ((b, p), s) in beliefs_pi.iter().zip(choices_pi).zip(beliefs_safe) {
        d += cross_engagement(space, p, b)? - cross_engagement(space, p, s)?;
    }
    Ok(d)
}

/// Expected engagement of one step under the three beliefs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    pub eng: f64,
    pub eng_u0: f64,
    pub eng_nps: f64,
}

/// `eng + ν₁ eng_u0 + ν₂ eng_nps`
pub fn penalized_reward(step: &StepRewards, nu1: f64, nu2: f64) -> f64 {
    step.eng + nu1 * step.eng_u0 + nu2 * step.eng_nps
}

/// Cumulative metrics of a trajectory (or their average over many).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub eng: f64,
    pub eng_u0: f64,
    pub eng_nps: f64,
    pub sum: f64,
}

impl ShiftMetrics {
    pub fn from_steps(steps: &[StepRewards]) -> Self {
        let mut m = Self::default();
        for s in steps {
            m.eng += s.eng;
            m.eng_u0 += s.eng_u0;
            m.eng_nps += s.eng_nps;
        }
        m.sum = m.eng + m.eng_u0 + m.eng_nps;
        m
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.eng, self.eng_u0, self.eng_nps, self.sum]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { eng: a[0], eng_u0: a[1], eng_nps: a[2], sum: a[3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Ground-truth users with exact beliefs.
    Oracle,
    /// Imagined users with learned beliefs.
    Estimated,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Oracle => "oracle",
            EvalMode::Estimated => "estimated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_traj: usize,
    pub horizon: usize,
    pub nu1: f64,
    pub nu2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_traj: 1000, horizon: 10, nu1: 1.0, nu2: 1.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 || self.horizon == 0 {
            return Err(Error::Config("evaluation needs at least one trajectory and one step".into()));
        }
        if !(self.nu1 >= 0.0) || !(self.nu2 >= 0.0) {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Means and standard errors over evaluated trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: ShiftMetrics,
    pub se: ShiftMetrics,
    pub n_traj: usize,
}

impl EvalReport {
    pub fn from_trajectories(per_traj: &[ShiftMetrics]) -> Self {
        let n = per_traj.len() as f64;
        let mut mean = [0.0; 4];
        for m in per_traj {
            mean.iter_mut().zip(m.as_array()).for_each(|(a, v)| *a += v / n);
        }
        let mut var = [0.0; 4];
        for m in per_traj {
            var.iter_mut().zip(m.as_array()).zip(mean).for_each(|((a, v), mu)| *a += (v - mu).powi(2));
        }
        let se = var.map(|v| if n > 1.0 { (v / (n - 1.0)).sqrt() / n.sqrt() } else { 0.0 });
        Self { mean: ShiftMetrics::from_array(mean), se: ShiftMetrics::from_array(se), n_traj: per_traj.len() }
    }

    pub const CSV_HEADER: &'static str =
        "policy,training_mode,eval_mode,eng,eng_u0,eng_nps,sum,se_eng,se_eng_u0,se_eng_nps,se_sum";

    pub fn csv_row(&self, policy: &str, training_mode: &str, eval_mode: EvalMode) -> String {
        let (m, s) = (&self.mean, &self.se);
        format!(
            "{policy},{training_mode},{eval_mode},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.eng, m.eng_u0, m.eng_nps, m.sum, s.eng, s.eng_u0, s.eng_nps, s.sum
        )
    }
}

/// Roll `cfg.n_traj` episodes and average their cumulative metrics.
pub fn evaluate_policy(
    recommender: &dyn Recommender,
    estimator: &dyn ShiftEstimator,
    source: UserSource<'_>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let per_traj = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            let mut session = recommender.begin();
            let ep =
                generate_training_trajectory(source, session.as_mut(), estimator, cfg.horizon, i as u64, &mut rng)?;
            Ok(ShiftMetrics::from_steps(&ep.rewards))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_trajectories(&per_traj))
}
