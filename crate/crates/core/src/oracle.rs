//! Exact inference over a user's preference given the true dynamics.
//!
//! The user's slate belief is a deterministic function of the last slate, so
//! the only hidden quantity is the preference bin. That turns the user into a
//! non-homogeneous HMM over `n` states whose transition matrix is picked by
//! the slate shown at each step. Messages are renormalized after every step.
//!
//! Choices never feed back into preference dynamics. Marginal predictions
//! under a history-independent policy are therefore exact mixtures over its
//! slates. History-dependent policies are handled by Monte Carlo over slates
//! and imagined choices, with exact belief updates inside each branch.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_simplex, normalize, Item, PrefSpace, Slate};
use crate::error::{Error, Result};
use crate::policy::SlatePolicy;
use crate::rng::sample_categorical;
use crate::user::{dot, ChoiceModel, UserModel};

/// Past this many distinct slates the cache stops growing.
const CACHE_CAP: usize = 8192;

/// Posterior over preference bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefVec(Vec<f64>);

impl BeliefVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs)?;
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, bin: usize) -> Result<Self> {
        Ok(Self(Slate::one_hot(n, bin)?.into_inner()))
    }

    pub(crate) fn from_unnormalized(mut v: Vec<f64>) -> Result<Self> {
        if normalize(&mut v) > 0.0 {
            Ok(Self(v))
        } else {
            Err(Error::DegenerateEvidence)
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        crate::env::argmax(&self.0)
    }
}

/// Row-stochastic `n x n` preference transition induced by one slate.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionOp {
    n: usize,
    matrix: Vec<f64>,
}

impl TransitionOp {
    pub fn new(n: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", matrix.len())));
        }
        for row in matrix.chunks(n) {
            check_simplex(row)?;
        }
        Ok(Self { n, matrix })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        (0..n).for_each(|i| m[i * n + i] = 1.0);
        Self { n, matrix: m }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.matrix[u * self.n..(u + 1) * self.n]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `b · M`
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (u, &p) in b.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(u)) {
                *o += p * m;
            }
        }
        out
    }

    /// `M · v`
    pub fn backward(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|u| dot(self.row(u), v)).collect()
    }
}

/// Everything inference needs about one slate, computed once.
#[derive(Debug)]
pub struct SlateOps {
    pub transition: TransitionOp,
    /// Row-major `P(x | u, s)` under the user's own temperature.
    pub choice: Vec<f64>,
    /// `Σ_x P(x | u, s) cos(u, x)` per preference bin.
    pub expected_engagement: Vec<f64>,
}

impl SlateOps {
    pub fn likelihood(&self, x: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.transition.n;
        (0..n).map(move |u| self.choice[u * n + x])
    }

    pub fn choice_row(&self, u: usize) -> &[f64] {
        let n = self.transition.n;
        &self.choice[u * n..(u + 1) * n]
    }
}

/// Exact inference engine. Cheap to clone; clones share the slate cache.
#[derive(Clone)]
pub struct Oracle {
    user: UserModel,
    choice: ChoiceModel,
    prior: BeliefVec,
    cache: Arc<Mutex<HashMap<Vec<u64>, Arc<SlateOps>>>>,
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle").field("params", self.user.params()).finish_non_exhaustive()
    }
}

impl Oracle {
    /// Oracle with the user's own initial-preference prior.
    pub fn new(user: UserModel) -> Self {
        let prior = BeliefVec(user.initial_pref_distribution());
        let choice = user.choice_model();
        Self { user, choice, prior, cache: Default::default() }
    }

    pub fn with_prior(user: UserModel, prior: BeliefVec) -> Result<Self> {
        if prior.len() != user.n_bins() {
            return Err(Error::Shape("prior length differs from bin count".into()));
        }
        let choice = user.choice_model();
        Ok(Self { user, choice, prior, cache: Default::default() })
    }

    /// Same dynamics with a different initial belief; shares the slate cache.
    pub fn with_initial_belief(&self, prior: BeliefVec) -> Result<Self> {
        self.check_belief(&prior)?;
        Ok(Self { user: self.user.clone(), choice: self.choice.clone(), prior, cache: self.cache.clone() })
    }

    pub fn choice(&self) -> &ChoiceModel {
        &self.choice
    }

    pub fn user(&self) -> &UserModel {
        &self.user
    }

    pub fn space(&self) -> &PrefSpace {
        self.user.space()
    }

    pub fn prior(&self) -> &BeliefVec {
        &self.prior
    }

    pub fn n_bins(&self) -> usize {
        self.user.n_bins()
    }

    pub fn slate_ops(&self, slate: &Slate) -> Result<Arc<SlateOps>> {
        let key: Vec<u64> = slate.probs().iter().map(|p| p.to_bits()).collect();
        if let Some(ops) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(ops.clone());
        }
        let n = self.n_bins();
        let transition = TransitionOp { n, matrix: self.user.transition_matrix_for_slate(slate)? };
        let choice = self.user.choice_matrix(slate)?;
        let expected_engagement = (0..n).map(|u| dot(&choice[u * n..(u + 1) * n], self.space().cos_row(u))).collect();
        let ops = Arc::new(SlateOps { transition, choice, expected_engagement });
        let mut cache = self.cache.lock().expect("cache poisoned");
        if cache.len() < CACHE_CAP {
            cache.insert(key, ops.clone());
        }
        Ok(ops)
    }

    pub fn transition_for_slate(&self, slate: &Slate) -> Result<TransitionOp> {
        Ok(self.slate_ops(slate)?.transition.clone())
    }

    pub fn filter_step(&self, belief: &BeliefVec, slate: &Slate, choice: Item) -> Result<BeliefVec> {
        self.space().check_bin(choice.0)?;
        self.check_belief(belief)?;
        let ops = self.slate_ops(slate)?;
        let post = belief.0.iter().zip(ops.likelihood(choice.0)).map(|(b, l)| b * l).collect();
        BeliefVec::from_unnormalized(post)
    }

    pub fn predict_step(&self, belief: &BeliefVec, op: &TransitionOp) -> Result<BeliefVec> {
        self.check_belief(belief)?;
        predict_step(belief, op)
    }

    /// Belief over `u_L` after observing `L` steps (the prior when `L = 0`).
    pub fn filter_sequence(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec> {
        check_history(slates, choices)?;
        let mut b = self.prior.clone();
        for (s, &x) in slates.iter().zip(choices) {
            b = self.filter_step(&b, s, x)?;
            b = predict_step(&b, &self.slate_ops(s)?.transition)?;
        }
        Ok(b)
    }

    /// Posterior over `u_0` given the whole observed history.
    pub fn smooth_initial(&self, slates: &[Slate], choices: &[Item]) -> Result<BeliefVec> {
        check_history(slates, choices)?;
        let masked: Vec<Option<Item>> = choices.iter().copied().map(Some).collect();
        self.smooth_initial_masked(slates, &masked)
    }

    /// As [`Oracle::smooth_initial`], with `None` marking unobserved choices.
    pub fn smooth_initial_masked(&self, slates: &[Slate], choices: &[Option<Item>]) -> Result<BeliefVec> {
        if slates.len() != choices.len() {
            return Err(Error::Shape("history slates and choices differ in length".into()));
        }
        if slates.is_empty() {
            return Ok(self.prior.clone());
        }
        let n = self.n_bins();
        // beta_t(u) ∝ P(x_{t:T} | u_t = u)
        let mut beta = vec![1.0; n];
        for (s, &x) in slates.iter().zip(choices).rev() {
            let ops = self.slate_ops(s)?;
            let carried = ops.transition.backward(&beta);
            beta = match x {
                Some(x) => {
                    self.space().check_bin(x.0)?;
                    ops.likelihood(x.0).zip(carried).map(|(l, c)| l * c).collect()
                }
                None => carried,
            };
            if normalize(&mut beta) <= 0.0 {
                return Err(Error::DegenerateEvidence);
            }
        }
        BeliefVec::from_unnormalized(self.prior.0.iter().zip(&beta).map(|(p, b)| p * b).collect())
    }

    /// Beliefs over `u_L ..= u_H` under `policy` after an observed history of length `L`.
    pub fn predict_future<R: Rng + ?Sized>(
        &self,
        slates: &[Slate],
        choices: &[Item],
        policy: &dyn SlatePolicy,
        horizon: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<BeliefVec>> {
        check_history(slates, choices)?;
        if horizon < slates.len() {
            return Err(Error::Parameter(format!(
                "horizon {horizon} precedes the end of a {}-step history",
                slates.len()
            )));
        }
        let start = self.filter_sequence(slates, choices)?;
        self.roll_forward(start, slates, choices, policy, horizon - slates.len(), n_samples, rng)
    }

    /// Belief over the preference at `t_target` had `policy` been deployed
    /// from the start, given the observed history under another policy.
    pub fn counterfactual<R: Rng + ?Sized>(
        &self,
        slates: &[Slate],
        choices: &[Item],
        policy: &dyn SlatePolicy,
        t_target: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<BeliefVec> {
        let b0 = self.smooth_initial(slates, choices)?;
        let mut path = self.roll_forward(b0, &[], &[], policy, t_target, n_samples, rng)?;
        Ok(path.pop().expect("path includes the start"))
    }

    /// Counterfactual beliefs over `u_0 ..= u_steps` under a policy, from a given initial belief.
    pub fn counterfactual_path<R: Rng + ?Sized>(
        &self,
        b0: BeliefVec,
        policy: &dyn SlatePolicy,
        steps: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<BeliefVec>> {
        self.check_belief(&b0)?;
        self.roll_forward(b0, &[], &[], policy, steps, n_samples, rng)
    }

    /// `[start, b_1, ..., b_steps]`, exact for history-independent policies.
    #[allow(clippy::too_many_arguments)]
    fn roll_forward<R: Rng + ?Sized>(
        &self,
        start: BeliefVec,
        slates: &[Slate],
        choices: &[Item],
        policy: &dyn SlatePolicy,
        steps: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<BeliefVec>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(start.clone());
        if steps == 0 {
            return Ok(out);
        }
        if policy.is_history_independent() {
            let mix = self.mixture_transition(&policy.slate_distribution(slates, choices))?;
            let mut b = start;
            for _ in 0..steps {
                b = predict_step(&b, &mix)?;
                out.push(b.clone());
            }
            return Ok(out);
        }
        if n_samples == 0 {
            return Err(Error::Parameter("Monte Carlo needs at least one sample".into()));
        }
        let n = self.n_bins();
        let mut acc = vec![vec![0.0; n]; steps];
        for _ in 0..n_samples {
            let mut hs = slates.to_vec();
            let mut hx = choices.to_vec();
            let mut b = start.clone();
            for slot in acc.iter_mut() {
                let slate = policy.sample_slate(&hs, &hx, &mut RngAdapter(rng));
                let ops = self.slate_ops(&slate)?;
                let pred = choice_marginal(&b.0, &ops.choice, n);
                let x = Item(sample_categorical(&pred, rng));
                let post = b.0.iter().zip(ops.likelihood(x.0)).map(|(p, l)| p * l).collect();
                b = predict_step(&BeliefVec::from_unnormalized(post)?, &ops.transition)?;
                slot.iter_mut().zip(&b.0).for_each(|(a, p)| *a += p);
                hs.push(slate);
                hx.push(x);
            }
        }
        for mut v in acc {
            normalize(&mut v);
            out.push(BeliefVec(v));
        }
        Ok(out)
    }

    /// `Σ_s π(s) M_s`
    pub fn mixture_transition(&self, dist: &[(f64, Slate)]) -> Result<TransitionOp> {
        let n = self.n_bins();
        let mut m = vec![0.0; n * n];
        for (w, s) in dist {
            let ops = self.slate_ops(s)?;
            m.iter_mut().zip(ops.transition.matrix()).for_each(|(a, b)| *a += w * b);
        }
        Ok(TransitionOp { n, matrix: m })
    }

    /// `P(x | history) = Σ_u b(u) P(x | u, s)`
    pub fn predictive_choice(&self, belief: &BeliefVec, slate: &Slate) -> Result<Vec<f64>> {
        let ops = self.slate_ops(slate)?;
        Ok(choice_marginal(&belief.0, &ops.choice, self.n_bins()))
    }

    fn check_belief(&self, b: &BeliefVec) -> Result<()> {
        if b.len() != self.n_bins() {
            return Err(Error::Shape(format!("belief has {} entries for {} bins", b.len(), self.n_bins())));
        }
        Ok(())
    }
}

pub fn predict_step(belief: &BeliefVec, op: &TransitionOp) -> Result<BeliefVec> {
    if belief.len() != op.n {
        return Err(Error::Shape("belief and transition sizes differ".into()));
    }
    let mut out = op.forward(&belief.0);
    normalize(&mut out);
    Ok(BeliefVec(out))
}

pub(crate) fn choice_marginal(b: &[f64], choice: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (u, &p) in b.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, &c) in out.iter_mut().zip(&choice[u * n..(u + 1) * n]) {
            *o += p * c;
        }
    }
    normalize(&mut out);
    out
}

fn check_history(slates: &[Slate], choices: &[Item]) -> Result<()> {
    if slates.len() != choices.len() {
        return Err(Error::Shape(format!("{} slates but {} choices", slates.len(), choices.len())));
    }
    Ok(())
}

/// Lets a generic `Rng` be passed where a trait object is needed.
pub(crate) struct RngAdapter<'a, R: ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> rand::RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
