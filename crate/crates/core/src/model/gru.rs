//! Gated recurrent encoder with a von Mises mixture head.
//!
//! Per step the input is `[slate (n) | log-slate (n) | choice one-hot (n) | evidence (n) | observed flag]`,
//! where the evidence row is the choice likelihood `P(x | u, s)` over
//! preference bins, scaled to peak at one. Hidden choices zero all but the slate.
//! The hidden state before any input is either a learned vector or, for the
//! conditioned model, `tanh(W_c b0 + c)` of an initial-preference belief.
//! Output position `p` reads the hidden state after `p` inputs.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::model::mixture::{head_forward, head_loss_grad, Trig};
use crate::nn::{sigmoid, ParamSet, Tensor};

pub(crate) const W_X: usize = 0;
pub(crate) const B_X: usize = 1;
pub(crate) const U_H: usize = 2;
pub(crate) const B_H: usize = 3;
pub(crate) const W_O: usize = 4;
pub(crate) const B_O: usize = 5;
pub(crate) const H0: usize = 6;
pub(crate) const W_C: usize = 7;
pub(crate) const B_C: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GruShape {
    pub n_bins: usize,
    pub hidden: usize,
    pub components: usize,
    pub conditioned: bool,
}

impl GruShape {
    pub fn input_dim(&self) -> usize {
        4 * self.n_bins + 1
    }

    pub fn output_dim(&self) -> usize {
        3 * self.components
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let (i, h, o, n) = (self.input_dim(), self.hidden, self.output_dim(), self.n_bins);
        let k = 1.0 / (h as f64).sqrt();
        let c = if self.conditioned { n } else { 0 };
        ParamSet {
            tensors: vec![
                Tensor::uniform("w_x", &[i, 3 * h], k, rng),
                Tensor::uniform("b_x", &[3 * h], k, rng),
                Tensor::uniform("u_h", &[h, 3 * h], k, rng),
                Tensor::uniform("b_h", &[3 * h], k, rng),
                // small head so the untrained model starts near a broad belief
                Tensor::uniform("w_o", &[h, o], 0.1 * k, rng),
                Tensor::zeros("b_o", &[o]),
                Tensor::zeros("h0", &[h]),
                Tensor::uniform("w_c", &[c, h], 1.0 / (n as f64).sqrt(), rng),
                Tensor::zeros("b_c", &[h]),
            ],
        }
    }
}

/// Choice likelihood over preference bins scaled to peak at one.
pub(crate) fn evidence(lik: &[f64]) -> Vec<f64> {
    let m = lik.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        lik.iter().map(|l| l / m).collect()
    } else {
        vec![0.0; lik.len()]
    }
}

/// Encoded step input for a single sequence; `seen` is the choice and its evidence row.
pub(crate) fn encode_step(n: usize, slate: &[f64], seen: Option<(usize, &[f64])>, out: &mut [f64]) {
    out[..n].copy_from_slice(slate);
    log_slate(slate, &mut out[n..2 * n]);
    out[2 * n..].iter_mut().for_each(|v| *v = 0.0);
    if let Some((x, ev)) = seen {
        out[2 * n + x] = 1.0;
        out[3 * n..4 * n].copy_from_slice(ev);
        out[4 * n] = 1.0;
    }
}

/// Centered log-probabilities, floored and scaled to order one.
pub(crate) fn log_slate(slate: &[f64], out: &mut [f64]) {
    out.iter_mut().zip(slate).for_each(|(o, s)| *o = s.max(1e-12).ln());
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|o| *o = (*o - mean) / 10.0);
}

/// A minibatch of equal-length sequences.
pub(crate) struct Batch {
    /// One `B x input_dim` matrix per step.
    pub inputs: Vec<Array2<f64>>,
    /// `B x n` initial beliefs for the conditioned model.
    pub cond: Option<Array2<f64>>,
    /// `(position, B x n likelihood rows)`.
    pub targets: Vec<(usize, Array2<f64>)>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.targets.first().map(|t| t.1.nrows()).unwrap_or(0)
    }
}

struct StepCache {
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

fn initial_hidden(shape: &GruShape, p: &ParamSet, rows: usize, cond: Option<&Array2<f64>>) -> Array2<f64> {
    match (shape.conditioned, cond) {
        (true, Some(b0)) => {
            let mut pre = b0.dot(&p.tensors[W_C].mat());
            pre += &p.tensors[B_C].vec();
            pre.mapv_inplace(f64::tanh);
            pre
        }
        _ => p.tensors[H0].vec().broadcast((rows, shape.hidden)).expect("broadcast").to_owned(),
    }
}

/// Mean loss over all target rows; accumulates the summed gradient into `grads` when given.
/// Returns `(summed loss, number of terms)`.
pub(crate) fn forward_backward(
    shape: &GruShape,
    p: &ParamSet,
    batch: &Batch,
    trig: &Trig,
    mut grads: Option<&mut ParamSet>,
) -> (f64, usize) {
    let h = shape.hidden;
    let rows = batch.rows();
    let steps = batch.targets.iter().map(|t| t.0).max().unwrap_or(0);
    let mut hs = Vec::with_capacity(steps + 1);
    hs.push(initial_hidden(shape, p, rows, batch.cond.as_ref()));
    let mut caches = Vec::with_capacity(steps);
    for t in 0..steps {
        let hp = &hs[t];
        let mut gx = batch.inputs[t].dot(&p.tensors[W_X].mat());
        gx += &p.tensors[B_X].vec();
        let mut gh = hp.dot(&p.tensors[U_H].mat());
        gh += &p.tensors[B_H].vec();
        let mut z = &gx.slice(s![.., ..h]) + &gh.slice(s![.., ..h]);
        z.mapv_inplace(sigmoid);
        let mut r = &gx.slice(s![.., h..2 * h]) + &gh.slice(s![.., h..2 * h]);
        r.mapv_inplace(sigmoid);
        let gh_n = gh.slice(s![.., 2 * h..]).to_owned();
        let mut n = &gx.slice(s![.., 2 * h..]) + &(&r * &gh_n);
        n.mapv_inplace(f64::tanh);
        let next = &n + &(&z * &(hp - &n));
        hs.push(next);
        caches.push(StepCache { z, r, n, gh_n });
    }

    let o = shape.output_dim();
    let mut total = 0.0;
    let mut count = 0;
    let mut dhs: Vec<Array2<f64>> = vec![Array2::zeros((rows, h)); steps + 1];
    let mut raw_grad = vec![0.0; o];
    for (pos, lik) in &batch.targets {
        let mut raw = hs[*pos].dot(&p.tensors[W_O].mat());
        raw += &p.tensors[B_O].vec();
        let mut draw = Array2::<f64>::zeros((rows, o));
        for b in 0..rows {
            let row = raw.row(b);
            let eval = head_forward(row.as_slice().expect("contiguous"), trig);
            total += head_loss_grad(&eval, lik.row(b).as_slice().expect("contiguous"), trig, &mut raw_grad);
            count += 1;
            draw.row_mut(b).assign(&ndarray::ArrayView1::from(&raw_grad[..]));
        }
        if let Some(g) = grads.as_deref_mut() {
            g.tensors[W_O].mat_mut().scaled_add(1.0, &hs[*pos].t().dot(&draw));
            g.tensors[B_O].vec_mut().scaled_add(1.0, &draw.sum_axis(Axis(0)));
            dhs[*pos].scaled_add(1.0, &draw.dot(&p.tensors[W_O].mat().t()));
        }
    }
    let Some(g) = grads else {
        return (total, count);
    };

    let mut dh_next = dhs[steps].clone();
    for t in (0..steps).rev() {
        let c = &caches[t];
        let hp = &hs[t];
        let one_minus_z = c.z.mapv(|v| 1.0 - v);
        let dn = &dh_next * &one_minus_z;
        let dz = &dh_next * &(hp - &c.n);
        let dn_pre = &dn * &c.n.mapv(|v| 1.0 - v * v);
        let dr = &dn_pre * &c.gh_n;
        let dz_pre = &dz * &(&c.z * &one_minus_z);
        let dr_pre = &dr * &c.r.mapv(|v| v * (1.0 - v));
        let mut dgx = Array2::<f64>::zeros((rows, 3 * h));
        dgx.slice_mut(s![.., ..h]).assign(&dz_pre);
        dgx.slice_mut(s![.., h..2 * h]).assign(&dr_pre);
        dgx.slice_mut(s![.., 2 * h..]).assign(&dn_pre);
        let mut dgh = dgx.clone();
        dgh.slice_mut(s![.., 2 * h..]).assign(&(&dn_pre * &c.r));
        g.tensors[W_X].mat_mut().scaled_add(1.0, &batch.inputs[t].t().dot(&dgx));
        g.tensors[B_X].vec_mut().scaled_add(1.0, &dgx.sum_axis(Axis(0)));
        g.tensors[U_H].mat_mut().scaled_add(1.0, &hp.t().dot(&dgh));
        g.tensors[B_H].vec_mut().scaled_add(1.0, &dgh.sum_axis(Axis(0)));
        let mut dh = &dh_next * &c.z;
        dh += &dgh.dot(&p.tensors[U_H].mat().t());
        dh += &dhs[t];
        dh_next = dh;
    }
    match (shape.conditioned, batch.cond.as_ref()) {
        (true, Some(b0)) => {
            let dpre = &dh_next * &hs[0].mapv(|v| 1.0 - v * v);
            g.tensors[W_C].mat_mut().scaled_add(1.0, &b0.t().dot(&dpre));
            g.tensors[B_C].vec_mut().scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        }
        _ => g.tensors[H0].vec_mut().scaled_add(1.0, &dh_next.sum_axis(Axis(0))),
    }
    (total, count)
}

/// Hidden state of one sequence, stepped one input at a time.
#[derive(Clone, Debug)]
pub(crate) struct GruState {
    pub h: Array1<f64>,
}

impl GruState {
    pub fn start(shape: &GruShape, p: &ParamSet, cond: Option<&[f64]>) -> Self {
        let h = match (shape.conditioned, cond) {
            (true, Some(b0)) => {
                let mut pre = ndarray::ArrayView1::from(b0).dot(&p.tensors[W_C].mat());
                pre += &p.tensors[B_C].vec();
                pre.mapv_inplace(f64::tanh);
                pre
            }
            _ => p.tensors[H0].vec().to_owned(),
        };
        Self { h }
    }

    pub fn step(&mut self, shape: &GruShape, p: &ParamSet, slate: &[f64], seen: Option<(usize, &[f64])>) {
        let (n, h) = (shape.n_bins, shape.hidden);
        let w = p.tensors[W_X].mat();
        let mut gx = p.tensors[B_X].vec().to_owned();
        let mut ls = vec![0.0; n];
        log_slate(slate, &mut ls);
        for (i, (&si, &li)) in slate.iter().zip(&ls).enumerate() {
            gx.scaled_add(si, &w.row(i));
            gx.scaled_add(li, &w.row(n + i));
        }
        if let Some((x, ev)) = seen {
            gx += &w.row(2 * n + x);
            for (i, &e) in ev.iter().enumerate() {
                if e != 0.0 {
                    gx.scaled_add(e, &w.row(3 * n + i));
                }
            }
            gx += &w.row(4 * n);
        }
        let mut gh = self.h.dot(&p.tensors[U_H].mat());
        gh += &p.tensors[B_H].vec();
        let mut next = Array1::zeros(h);
        for j in 0..h {
            let z = sigmoid(gx[j] + gh[j]);
            let r = sigmoid(gx[h + j] + gh[h + j]);
            let nn = (gx[2 * h + j] + r * gh[2 * h + j]).tanh();
            next[j] = (1.0 - z) * nn + z * self.h[j];
        }
        self.h = next;
    }

    /// Raw head output `[logits; (a, b) pairs]`.
    pub fn head(&self, p: &ParamSet) -> Vec<f64> {
        let mut raw = self.h.dot(&p.tensors[W_O].mat());
        raw += &p.tensors[B_O].vec();
        raw.to_vec()
    }
}
