//! Recurrent actor-critic policy.
//!
//! One LSTM layer feeds a categorical head over the discrete actions and a
//! scalar value head. Each step's input is the previous slate, the previous
//! choice, the three per-step preference beliefs and the elapsed fraction of
//! the horizon; beliefs are treated as fixed features.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Observation;
use crate::nn::{sigmoid, ParamSet, Tensor};

const W_X: usize = 0;
const B: usize = 1;
const U_H: usize = 2;
const W_PI: usize = 3;
const B_PI: usize = 4;
const W_V: usize = 5;
const B_V: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmShape {
    pub n_bins: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

impl LstmShape {
    /// `[prev slate | prev choice | filter | initial | nps | t / H]`
    pub fn input_dim(&self) -> usize {
        5 * self.n_bins + 1
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let (i, h, a) = (self.input_dim(), self.hidden, self.n_actions);
        let k = 1.0 / (h as f64).sqrt();
        let mut bias = Tensor::zeros("b", &[4 * h]);
        // forget gate starts open
        bias.data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        ParamSet {
            tensors: vec![
                Tensor::uniform("w_x", &[i, 4 * h], k, rng),
                bias,
                Tensor::uniform("u_h", &[h, 4 * h], k, rng),
                Tensor::uniform("w_pi", &[h, a], 0.01 * k, rng),
                Tensor::zeros("b_pi", &[a]),
                Tensor::uniform("w_v", &[h, 1], k, rng),
                Tensor::zeros("b_v", &[1]),
            ],
        }
    }

    /// Encode what the recommender sees at one step.
    pub fn encode(&self, obs: &Observation<'_>, horizon: usize, out: &mut [f64]) {
        let n = self.n_bins;
        out.iter_mut().for_each(|v| *v = 0.0);
        if let (Some(s), Some(x)) = (obs.slates.last(), obs.choices.last()) {
            out[..n].copy_from_slice(s.probs());
            out[n + x.0] = 1.0;
        }
        out[2 * n..3 * n].copy_from_slice(obs.beliefs.filter.probs());
        out[3 * n..4 * n].copy_from_slice(obs.beliefs.initial.probs());
        out[4 * n..5 * n].copy_from_slice(obs.beliefs.nps.probs());
        out[5 * n] = obs.t as f64 / horizon.max(1) as f64;
    }
}

/// Recurrent state of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(shape: &LstmShape) -> Self {
        Self { h: Array1::zeros(shape.hidden), c: Array1::zeros(shape.hidden) }
    }
}

/// Action probabilities and value after consuming `x`.
pub fn step(shape: &LstmShape, p: &ParamSet, state: &mut LstmState, x: &[f64]) -> (Vec<f64>, f64) {
    let h = shape.hidden;
    let w = p.tensors[W_X].mat();
    let mut g = p.tensors[B].vec().to_owned();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            g.scaled_add(xi, &w.row(i));
        }
    }
    g += &state.h.dot(&p.tensors[U_H].mat());
    for j in 0..h {
        let ig = sigmoid(g[j]);
        let fg = sigmoid(g[h + j]);
        let og = sigmoid(g[2 * h + j]);
        let cc = g[3 * h + j].tanh();
        state.c[j] = fg * state.c[j] + ig * cc;
        state.h[j] = og * state.c[j].tanh();
    }
    let mut logits = state.h.dot(&p.tensors[W_PI].mat());
    logits += &p.tensors[B_PI].vec();
    let probs = crate::model::mixture::softmax(logits.as_slice().expect("contiguous"));
    let value = state.h.dot(&p.tensors[W_V].mat())[0] + p.tensors[B_V].data[0];
    (probs, value)
}

/// Equal-length episodes laid out step-major for batched training.
pub struct SeqBatch {
    /// One `B x input_dim` matrix per step.
    pub inputs: Vec<Array2<f64>>,
    /// `[step][row]`
    pub actions: Vec<Vec<usize>>,
    pub old_logp: Vec<Vec<f64>>,
    pub old_value: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub clip: f64,
    pub value_clip: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Share of steps whose ratio left the clip range.
    pub clip_frac: f64,
}

struct Cache {
    i: Array2<f64>,
    f: Array2<f64>,
    o: Array2<f64>,
    cc: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Clipped-surrogate loss, averaged over all steps, with its gradient accumulated into `grads`.
pub fn ppo_loss(
    shape: &LstmShape,
    p: &ParamSet,
    batch: &SeqBatch,
    w: &LossWeights,
    mut grads: Option<&mut ParamSet>,
) -> LossParts {
    let (h, a) = (shape.hidden, shape.n_actions);
    let steps = batch.inputs.len();
    let rows = batch.inputs.first().map(|m| m.nrows()).unwrap_or(0);
    let n = (steps * rows).max(1) as f64;
    let mut hs = vec![Array2::<f64>::zeros((rows, h))];
    let mut cs = vec![Array2::<f64>::zeros((rows, h))];
    let mut caches = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut g = batch.inputs[t].dot(&p.tensors[W_X].mat());
        g += &hs[t].dot(&p.tensors[U_H].mat());
        g += &p.tensors[B].vec();
        let i = g.slice(s![.., ..h]).mapv(sigmoid);
        let f = g.slice(s![.., h..2 * h]).mapv(sigmoid);
        let o = g.slice(s![.., 2 * h..3 * h]).mapv(sigmoid);
        let cc = g.slice(s![.., 3 * h..]).mapv(f64::tanh);
        let c = &f * &cs[t] + &i * &cc;
        let tanh_c = c.mapv(f64::tanh);
        hs.push(&o * &tanh_c);
        caches.push(Cache { i, f, o, cc, c_prev: cs[t].clone(), tanh_c });
        cs.push(c);
    }

    let mut parts = LossParts::default();
    let mut dhs: Vec<Array2<f64>> = vec![Array2::zeros((rows, h)); steps + 1];
    for t in 0..steps {
        let ht = &hs[t + 1];
        let mut logits = ht.dot(&p.tensors[W_PI].mat());
        logits += &p.tensors[B_PI].vec();
        let values = ht.dot(&p.tensors[W_V].mat()).column(0).to_owned() + p.tensors[B_V].data[0];
        let mut dlogits = Array2::<f64>::zeros((rows, a));
        let mut dvalue = Array2::<f64>::zeros((rows, 1));
        for r in 0..rows {
            let pi = crate::model::mixture::softmax(logits.row(r).as_slice().expect("contiguous"));
            let act = batch.actions[t][r];
            let logp = pi[act].max(1e-300).ln();
            let adv = batch.advantages[t][r];
            let ratio = (logp - batch.old_logp[t][r]).exp();
            let clipped = ratio.clamp(1.0 - w.clip, 1.0 + w.clip);
            let surr = (ratio * adv).min(clipped * adv);
            parts.policy -= surr / n;
            let active = ratio * adv <= clipped * adv;
            if (ratio - clipped).abs() > 0.0 {
                parts.clip_frac += 1.0 / n;
            }
            let ent: f64 = -pi.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            parts.entropy += ent / n;
            // d(-surr)/dlogp = -adv * ratio when the unclipped branch is active
            let dlogp = if active { -adv * ratio / n } else { 0.0 };
            for k in 0..a {
                let onehot = (k == act) as u8 as f64;
                let mut d = dlogp * (onehot - pi[k]);
                // d(-c * H)/dlogit_k = c * pi_k (ln pi_k + H)
                d += w.entropy_coeff * pi[k] * (pi[k].max(1e-300).ln() + ent) / n;
                dlogits[[r, k]] = d;
            }
            let (v, v_old, ret) = (values[r], batch.old_value[t][r], batch.returns[t][r]);
            let v_clip = v_old + (v - v_old).clamp(-w.value_clip, w.value_clip);
            let (l1, l2) = ((v - ret).powi(2), (v_clip - ret).powi(2));
            parts.value += l1.max(l2) / n;
            let dv = if l1 >= l2 {
                2.0 * (v - ret)
            } else if (v - v_old).abs() < w.value_clip {
                2.0 * (v_clip - ret)
            } else {
                0.0
            };
            dvalue[[r, 0]] = w.value_coeff * dv / n;
        }
        if let Some(g) = grads.as_deref_mut() {
            g.tensors[W_PI].mat_mut().scaled_add(1.0, &ht.t().dot(&dlogits));
            g.tensors[B_PI].vec_mut().scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
            g.tensors[W_V].mat_mut().scaled_add(1.0, &ht.t().dot(&dvalue));
            g.tensors[B_V].data[0] += dvalue.sum();
            let mut dh = dlogits.dot(&p.tensors[W_PI].mat().t());
            dh += &dvalue.dot(&p.tensors[W_V].mat().t());
            dhs[t + 1] = dh;
        }
    }
    parts.total = parts.policy + w.value_coeff * parts.value - w.entropy_coeff * parts.entropy;
    let Some(g) = grads else {
        return parts;
    };

    let mut dh_next = Array2::<f64>::zeros((rows, h));
    let mut dc_next = Array2::<f64>::zeros((rows, h));
    for t in (0..steps).rev() {
        let c = &caches[t];
        let dh = &dh_next + &dhs[t + 1];
        let d_o = &dh * &c.tanh_c;
        let dc = &dc_next + &(&dh * &c.o * &c.tanh_c.mapv(|v| 1.0 - v * v));
        let di = &dc * &c.cc;
        let df = &dc * &c.c_prev;
        let dcc = &dc * &c.i;
        let mut dg = Array2::<f64>::zeros((rows, 4 * h));
        dg.slice_mut(s![.., ..h]).assign(&(&di * &c.i.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., h..2 * h]).assign(&(&df * &c.f.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., 2 * h..3 * h]).assign(&(&d_o * &c.o.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., 3 * h..]).assign(&(&dcc * &c.cc.mapv(|v| 1.0 - v * v)));
        g.tensors[W_X].mat_mut().scaled_add(1.0, &batch.inputs[t].t().dot(&dg));
        g.tensors[B].vec_mut().scaled_add(1.0, &dg.sum_axis(Axis(0)));
        g.tensors[U_H].mat_mut().scaled_add(1.0, &hs[t].t().dot(&dg));
        dh_next = dg.dot(&p.tensors[U_H].mat().t());
        dc_next = &dc * &c.f;
    }
    parts
}
