//! Simulated ground-truth user.
//!
//! Choices follow a conditional logit weighted by slate prevalence, with a
//! choice temperature that depends on where the preference sits on the
//! circle. After each slate the user forms a belief over future slates
//! (`∝ s³`) and moves its preference toward ones that are convenient under
//! that belief.
//!
//! The value of moving from `u` to `u'` is the expected engagement of the
//! item the user would pick *as `u'`* from the believed slate, scored as a
//! `λ`/`1 - λ` mix of engagement under the current and the new preference:
//!
//! `V(u, b, u') = Σ_x P(x | u', b) [λ cos(u, x) + (1 - λ) cos(u', x)]`
//!
//! so preferences drift toward regions where choices are sharp (high `β_c`).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_simplex, normalize, Item, PrefSpace, Slate};
use crate::error::{Error, Result};
use crate::rng::sample_categorical;

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_BETA_D: f64 = 25.0;
pub const DEFAULT_INIT_MEAN: f64 = 130.0;
pub const DEFAULT_INIT_STD: f64 = 20.0;

/// Shape of the choice-temperature field: the max of two wrapped Gaussian
/// bumps over a constant floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaFieldSpec {
    pub peaks: Vec<(f64, f64)>,
    pub width_deg: f64,
    pub floor: f64,
}

impl Default for BetaFieldSpec {
    fn default() -> Self {
        Self { peaks: vec![(80.0, 1.0), (270.0, 4.0)], width_deg: 35.0, floor: 0.25 }
    }
}

impl BetaFieldSpec {
    /// The misspecified variant: the two peak heights trade places.
    pub fn swapped() -> Self {
        Self { peaks: vec![(80.0, 4.0), (270.0, 1.0)], ..Self::default() }
    }

    pub fn evaluate(&self, space: &PrefSpace) -> Result<Vec<f64>> {
        if !(self.width_deg > 0.0) || !(self.floor > 0.0) {
            return Err(Error::Parameter("beta field width and floor must be positive".into()));
        }
        if self.peaks.iter().any(|&(_, h)| !(h > 0.0)) {
            return Err(Error::Parameter("beta field peak heights must be positive".into()));
        }
        Ok((0..space.n_bins())
            .map(|i| {
                let c = space.bin_center_deg(i);
                self.peaks.iter().fold(self.floor, |acc, &(at, height)| {
                    // peaks are pinned to their bin center so the peak value is exact
                    let d = crate::env::circular_distance(c, space.bin_center_deg(space.bin_of_angle(at)));
                    acc.max(height * (-0.5 * (d / self.width_deg).powi(2)).exp())
                })
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserParams {
    pub lambda: f64,
    pub beta_d: f64,
    pub beta_c_field: Vec<f64>,
    pub init_pref_mean: f64,
    pub init_pref_std: f64,
}

impl UserParams {
    pub fn with_field(space: &PrefSpace, field: &BetaFieldSpec) -> Result<Self> {
        Ok(Self {
            lambda: DEFAULT_LAMBDA,
            beta_d: DEFAULT_BETA_D,
            beta_c_field: field.evaluate(space)?,
            init_pref_mean: DEFAULT_INIT_MEAN,
            init_pref_std: DEFAULT_INIT_STD,
        })
    }

    pub fn default_for(space: &PrefSpace) -> Self {
        Self::with_field(space, &BetaFieldSpec::default()).expect("default field is valid")
    }

    pub fn validate(&self, space: &PrefSpace) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta_d >= 0.0) || !self.beta_d.is_finite() {
            return Err(Error::Parameter(format!("beta_d must be non-negative, got {}", self.beta_d)));
        }
        if self.beta_c_field.len() != space.n_bins() {
            return Err(Error::Shape(format!(
                "beta_c field has {} entries for {} bins",
                self.beta_c_field.len(),
                space.n_bins()
            )));
        }
        if self.beta_c_field.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Parameter("beta_c entries must be positive".into()));
        }
        if !(self.init_pref_std > 0.0) {
            return Err(Error::Parameter("init_pref_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub pref: usize,
    pub slate_belief: Slate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub choice: Item,
    pub reward: f64,
    pub next_state: UserState,
}

/// Ground-truth user dynamics over a fixed preference space.
#[derive(Clone, Debug)]
pub struct UserModel {
    space: PrefSpace,
    params: UserParams,
}

impl UserModel {
    pub fn new(space: PrefSpace, params: UserParams) -> Result<Self> {
        params.validate(&space)?;
        Ok(Self { space, params })
    }

    pub fn default_model() -> Self {
        let space = PrefSpace::default();
        let params = UserParams::default_for(&space);
        Self { space, params }
    }

    pub fn space(&self) -> &PrefSpace {
        &self.space
    }

    pub fn params(&self) -> &UserParams {
        &self.params
    }

    pub fn n_bins(&self) -> usize {
        self.space.n_bins()
    }

    /// The user's own choice rule.
    pub fn choice_model(&self) -> ChoiceModel {
        ChoiceModel::new(self.space.clone(), self.params.beta_c_field.clone()).expect("validated params")
    }

    pub fn beta_c(&self, u: usize) -> Result<f64> {
        self.space.check_bin(u)?;
        Ok(self.params.beta_c_field[u])
    }

    /// `P(x | u, s)` with temperature `beta`.
    pub fn choice_distribution(&self, u: usize, slate: &Slate, beta: f64) -> Result<Vec<f64>> {
        self.space.check_bin(u)?;
        self.check_slate(slate)?;
        let mut p = vec![0.0; self.n_bins()];
        choice_probs_into(&self.space, u, slate.probs(), beta, &mut p);
        Ok(p)
    }

    /// Choice distribution using the user's own temperature at `u`.
    pub fn user_choice_distribution(&self, u: usize, slate: &Slate) -> Result<Vec<f64>> {
        self.choice_distribution(u, slate, self.beta_c(u)?)
    }

    /// Row-major `n x n` table of `P(x | u, s)` under the user's own `β_c`.
    pub fn choice_matrix(&self, slate: &Slate) -> Result<Vec<f64>> {
        self.check_slate(slate)?;
        Ok(choice_matrix(&self.space, &self.params.beta_c_field, slate.probs()))
    }

    pub fn update_slate_belief(&self, slate: &Slate) -> Result<Slate> {
        self.check_slate(slate)?;
        Ok(slate_belief(slate))
    }

    pub fn preference_value(&self, u_cur: usize, u_next: usize, belief: &Slate) -> Result<f64> {
        self.space.check_bin(u_cur)?;
        self.space.check_bin(u_next)?;
        let anticipated = self.user_choice_distribution(u_next, belief)?;
        let lam = self.params.lambda;
        Ok(anticipated
            .iter()
            .enumerate()
            .map(|(x, p)| {
                p * (lam * self.space.cos_unchecked(u_cur, x) + (1.0 - lam) * self.space.cos_unchecked(u_next, x))
            })
            .sum())
    }

    pub fn preference_transition(&self, u_cur: usize, belief: &Slate) -> Result<Vec<f64>> {
        self.space.check_bin(u_cur)?;
        self.check_slate(belief)?;
        let m = self.transition_matrix_for_belief(belief)?;
        let n = self.n_bins();
        Ok(m[u_cur * n..(u_cur + 1) * n].to_vec())
    }

    /// Full `n x n` row-stochastic preference transition under a slate belief.
    pub fn transition_matrix_for_belief(&self, belief: &Slate) -> Result<Vec<f64>> {
        self.check_slate(belief)?;
        let n = self.n_bins();
        let pc = choice_matrix(&self.space, &self.params.beta_c_field, belief.probs());
        let lam = self.params.lambda;
        // own[u'] = Σ_x P(x|u') cos(u', x); cross[u][u'] = Σ_x P(x|u') cos(u, x)
        let own: Vec<f64> = (0..n).map(|v| dot(&pc[v * n..(v + 1) * n], self.space.cos_row(v))).collect();
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            let row = &mut out[u * n..(u + 1) * n];
            let cu = self.space.cos_row(u);
            for v in 0..n {
                let value = lam * dot(&pc[v * n..(v + 1) * n], cu) + (1.0 - lam) * own[v];
                row[v] = self.params.beta_d * value;
            }
            softmax_in_place(row);
        }
        Ok(out)
    }

    /// Transition induced by showing `slate` (belief is a function of the slate alone).
    pub fn transition_matrix_for_slate(&self, slate: &Slate) -> Result<Vec<f64>> {
        let belief = self.update_slate_belief(slate)?;
        self.transition_matrix_for_belief(&belief)
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &UserState, slate: &Slate, rng: &mut R) -> Result<StepOutcome> {
        let choice_p = self.user_choice_distribution(state.pref, slate)?;
        let choice = sample_categorical(&choice_p, rng);
        let reward = self.space.cos_unchecked(state.pref, choice);
        let belief = slate_belief(slate);
        let trans = self.preference_transition(state.pref, &belief)?;
        let pref = sample_categorical(&trans, rng);
        Ok(StepOutcome { choice: Item(choice), reward, next_state: UserState { pref, slate_belief: belief } })
    }

    /// Discretized wrapped-normal prior over the initial preference.
    pub fn initial_pref_distribution(&self) -> Vec<f64> {
        self.space
            .wrapped_gaussian_weights(self.params.init_pref_mean, self.params.init_pref_std)
            .expect("params validated")
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> UserState {
        let pref = sample_categorical(&self.initial_pref_distribution(), rng);
        UserState { pref, slate_belief: self.space.uniform_slate() }
    }

    fn check_slate(&self, slate: &Slate) -> Result<()> {
        if slate.len() != self.n_bins() {
            return Err(Error::Shape(format!("slate has {} entries for {} bins", slate.len(), self.n_bins())));
        }
        check_simplex(slate.probs())
    }
}

/// The conditional-logit choice rule on its own, for components that only
/// know (or assume) the user's temperature field.
#[derive(Clone)]
pub struct ChoiceModel {
    space: PrefSpace,
    beta_field: Arc<Vec<f64>>,
    cache: Arc<Mutex<HashMap<Vec<u64>, Arc<Vec<f64>>>>>,
}

impl std::fmt::Debug for ChoiceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChoiceModel").field("beta_field", &self.beta_field).finish_non_exhaustive()
    }
}

impl ChoiceModel {
    pub fn new(space: PrefSpace, beta_field: Vec<f64>) -> Result<Self> {
        if beta_field.len() != space.n_bins() {
            return Err(Error::Shape("beta field length differs from bin count".into()));
        }
        if beta_field.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Parameter("beta entries must be finite and non-negative".into()));
        }
        Ok(Self { space, beta_field: Arc::new(beta_field), cache: Default::default() })
    }

    pub fn space(&self) -> &PrefSpace {
        &self.space
    }

    pub fn beta_field(&self) -> &[f64] {
        &self.beta_field
    }

    /// Row-major `P(x | u, s)`, cached per distinct slate.
    pub fn matrix(&self, slate: &Slate) -> Result<Arc<Vec<f64>>> {
        if slate.len() != self.space.n_bins() {
            return Err(Error::Shape("slate length differs from bin count".into()));
        }
        let key: Vec<u64> = slate.probs().iter().map(|p| p.to_bits()).collect();
        if let Some(m) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        check_simplex(slate.probs())?;
        let m = Arc::new(choice_matrix(&self.space, &self.beta_field, slate.probs()));
        let mut cache = self.cache.lock().expect("cache poisoned");
        if cache.len() < 8192 {
            cache.insert(key, m.clone());
        }
        Ok(m)
    }

    /// `P(x | u, s)` for every `u` at a fixed item `x`.
    pub fn likelihood(&self, slate: &Slate, x: Item) -> Result<Vec<f64>> {
        self.space.check_bin(x.0)?;
        let n = self.space.n_bins();
        let m = self.matrix(slate)?;
        Ok((0..n).map(|u| m[u * n + x.0]).collect())
    }

    /// Predicted choice distribution `Σ_u b(u) P(x | u, s)`.
    pub fn choice_belief(&self, belief: &[f64], slate: &Slate) -> Result<Vec<f64>> {
        let n = self.space.n_bins();
        if belief.len() != n {
            return Err(Error::Shape("belief length differs from bin count".into()));
        }
        let m = self.matrix(slate)?;
        Ok(crate::oracle::choice_marginal(belief, &m, n))
    }
}

pub(crate) fn slate_belief(slate: &Slate) -> Slate {
    let mut b: Vec<f64> = slate.probs().iter().map(|p| p * p * p).collect();
    normalize(&mut b);
    Slate::new(b).unwrap_or_else(|_| unreachable!("cube of a simplex renormalizes"))
}

pub(crate) fn choice_probs_into(space: &PrefSpace, u: usize, slate: &[f64], beta: f64, out: &mut [f64]) {
    let cos = space.cos_row(u);
    // shift by the largest exponent on the slate's support
    let top = slate.iter().zip(cos).filter(|(s, _)| **s > 0.0).map(|(_, c)| beta * c).fold(f64::NEG_INFINITY, f64::max);
    for ((o, &s), &c) in out.iter_mut().zip(slate).zip(cos) {
        *o = if s > 0.0 { s * (beta * c - top).exp() } else { 0.0 };
    }
    normalize(out);
}

pub(crate) fn choice_matrix(space: &PrefSpace, beta_field: &[f64], slate: &[f64]) -> Vec<f64> {
    let n = space.n_bins();
    let mut m = vec![0.0; n * n];
    for u in 0..n {
        choice_probs_into(space, u, slate, beta_field[u], &mut m[u * n..(u + 1) * n]);
    }
    m
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter_mut().for_each(|x| *x = (*x - max).exp());
    normalize(v);
}
